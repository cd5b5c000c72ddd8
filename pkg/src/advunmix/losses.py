"""Least-squares discriminator and the masker's loss terms.

All losses are batch means: the discriminator and confusion terms average over
scored images, the energy and cycle terms over pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from advunmix.errors import ConfigError, DimensionError, DivergenceError
from advunmix.separator import LEAKY_SLOPE, ArchDescriptor, check_input, init_weights


class Discriminator(nn.Module):
    """DCGAN-style stride-2 conv stack with an unbounded scalar head."""

    def __init__(self, arch: ArchDescriptor, seed: int = 1):
        super().__init__()
        self.arch = arch
        layers, c_in, size = [], arch.channels, arch.height
        for i in range(arch.n_down):
            c = arch.base_channels * 2 ** i
            layers += [nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(LEAKY_SLOPE)]
            c_in, size = c, size // 2
        layers.append(nn.Conv2d(c_in, 1, size, 1, 0))
        self.net = nn.Sequential(*layers)
        init_weights(self, torch.Generator().manual_seed(seed), "normal")

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(check_input(self.arch, y)).flatten()


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 5.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")


def _nonempty(t: torch.Tensor, what: str) -> None:
    if t.shape[0] == 0:
        raise ConfigError(f"empty batch of {what}")


def disc_loss(D: Discriminator, reals: torch.Tensor, fakes: torch.Tensor) -> torch.Tensor:
    """mean (D(y) - 1)^2 over reals + mean D(z)^2 over fakes. Fakes are detached here."""
    _nonempty(reals, "reals")
    _nonempty(fakes, "fakes")
    return ((D(reals) - 1) ** 2).mean() + (D(fakes.detach()) ** 2).mean()


def confusion_loss(D: Discriminator, fakes: torch.Tensor) -> torch.Tensor:
    """mean (D(z) - 1)^2; gradients reach the masker through ``fakes``."""
    _nonempty(fakes, "fakes")
    return ((D(fakes) - 1) ** 2).mean()


def energy_equity_loss(y: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    if y.shape != masks.shape:
        raise DimensionError(f"mixture {tuple(y.shape)} and mask {tuple(masks.shape)} differ")
    return ((y * masks) ** 2 + (y * (1 - masks)) ** 2).mean()


def cycle_loss(y1: torch.Tensor, y2: torch.Tensor, y1_bar: torch.Tensor, y2_bar: torch.Tensor,
               norm: str = "l1") -> torch.Tensor:
    for a, b in ((y1, y1_bar), (y2, y2_bar)):
        if a.shape != b.shape:
            raise DimensionError(f"cycle shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if norm == "l1":
        return (y1_bar - y1).abs().mean() + (y2_bar - y2).abs().mean()
    if norm == "l2":
        return ((y1_bar - y1) ** 2).mean() + ((y2_bar - y2) ** 2).mean()
    raise ConfigError(f"unknown cycle norm {norm!r}")


def total_masker_loss(l_c, l_m, l_e, w: LossWeights):
    vals = {k: float(v.detach()) if torch.is_tensor(v) else float(v)
            for k, v in (("l_c", l_c), ("l_m", l_m), ("l_e", l_e))}
    for name, v in vals.items():
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite {name} = {v}", dict(vals))
    return l_c + w.alpha * l_m + w.beta * l_e
