"""Masking network M(y) and the separation it induces.

The separator splits a mixture ``y`` into ``x_hat = y * M(y)`` and
``b_hat = y - x_hat``; the mask is squashed into (0, 1) by a sigmoid so both
estimates stay non-negative for non-negative inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from advunmix import checkpoint
from advunmix.errors import ConfigError, DimensionError, IncompatibleCheckpointError

INIT_STD = 0.02
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ArchDescriptor:
    height: int
    width: int
    channels: int
    base_channels: int = 64

    def __post_init__(self):
        if self.height != self.width:
            raise ConfigError("only square images are supported")
        if self.height < 4 or self.height & (self.height - 1):
            raise ConfigError(f"image size must be a power of two >= 4, got {self.height}")
        if self.channels < 1 or self.base_channels < 1:
            raise ConfigError("channels and base_channels must be positive")

    @property
    def n_down(self) -> int:
        """Stride-2 stages; brings the bottleneck to 4x4 (2x2 for 4x4 inputs)."""
        return max(1, int(math.log2(self.height // 4)))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(**{k: int(d[k]) for k in ("height", "width", "channels", "base_channels")})


def init_weights(module: nn.Module, generator: torch.Generator, scheme: str = "normal") -> None:
    """Zero biases; weights N(0, 0.02) (``"normal"``) or fan-in scaled (``"kaiming"``).

    Draws come from ``generator`` in parameter order, so a seed fixes the network.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif scheme == "normal":
                p.copy_(torch.randn(p.shape, generator=generator) * INIT_STD)
            elif scheme == "kaiming":
                nn.init.kaiming_normal_(p, a=LEAKY_SLOPE, generator=generator)
            else:
                raise ConfigError(f"unknown init scheme {scheme!r}")


class MaskNet(nn.Module):
    """Normalization-free encoder/decoder producing a per-pixel, per-channel mask.

    Encoder channels grow as base, 2*base, ...; the decoder mirrors them so the
    layer feeding the output has ``base`` channels. Weights are fan-in scaled:
    without normalization layers a 0.02-std init leaves the mask nearly
    independent of its input.
    """

    def __init__(self, arch: ArchDescriptor, seed: int = 0):
        super().__init__()
        self.arch = arch
        chans = [arch.base_channels * 2 ** i for i in range(arch.n_down)]
        enc, c_in = [], arch.channels
        for c in chans:
            enc += [nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(LEAKY_SLOPE)]
            c_in = c
        self.encoder = nn.Sequential(*enc)
        self.bottleneck = nn.Sequential(nn.Conv2d(c_in, c_in, 3, 1, 1), nn.ReLU())
        dec = []
        for c in reversed(chans[:-1]):
            dec += [nn.ConvTranspose2d(c_in, c, 4, 2, 1), nn.ReLU()]
            c_in = c
        dec.append(nn.ConvTranspose2d(c_in, arch.channels, 4, 2, 1))
        self.decoder = nn.Sequential(*dec)
        init_weights(self, torch.Generator().manual_seed(seed), "kaiming")

    def logits(self, y: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.bottleneck(self.encoder(y)))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(y))


@dataclass
class SeparationResult:
    x_hat: torch.Tensor
    b_hat: torch.Tensor
    mask: torch.Tensor


def check_input(arch: ArchDescriptor, y: torch.Tensor) -> torch.Tensor:
    """Validate shape; returns a 4-D batch view (a single CHW image gets a batch axis)."""
    if y.dim() == 3:
        y = y.unsqueeze(0)
    if y.dim() != 4 or tuple(y.shape[1:]) != arch.input_shape:
        raise DimensionError(f"expected input (N, {', '.join(map(str, arch.input_shape))}), "
                             f"got {tuple(y.shape)}")
    return y


def mask_forward(model: MaskNet, y: torch.Tensor) -> torch.Tensor:
    squeeze = y.dim() == 3
    m = model(check_input(model.arch, y))
    return m[0] if squeeze else m


def separate(model: MaskNet, y: torch.Tensor) -> SeparationResult:
    m = mask_forward(model, y)
    x_hat = y * m
    return SeparationResult(x_hat=x_hat, b_hat=y - x_hat, mask=m)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, C) or (H, W, C) numpy images -> NCHW / CHW tensor."""
    arr = np.asarray(images)
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    return t.permute(0, 3, 1, 2).contiguous() if arr.ndim == 4 else t.permute(2, 0, 1).contiguous()


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    t = t.detach().cpu()
    t = t.permute(0, 2, 3, 1) if t.dim() == 4 else t.permute(1, 2, 0)
    return t.numpy().astype(np.float32)


@torch.no_grad()
def separate_images(model: MaskNet, images: np.ndarray, batch_size: int = 256
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Run the separator over (N, H, W, C) images; returns (x_hat, b_hat) as numpy."""
    xs, bs = [], []
    for i in range(0, len(images), batch_size):
        y = images_to_tensor(images[i:i + batch_size]).to(next(model.parameters()).dtype)
        r = separate(model, y)
        xs.append(tensor_to_images(r.x_hat))
        bs.append(tensor_to_images(r.b_hat))
    return np.concatenate(xs), np.concatenate(bs)


# ---------------------------------------------------------------- persistence

def module_tensors(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    own = module.state_dict()
    sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(sub) != set(own):
        raise IncompatibleCheckpointError(
            f"tensor names do not match architecture (missing {sorted(set(own) - set(sub))[:3]}, "
            f"unexpected {sorted(set(sub) - set(own))[:3]})")
    for k, v in sub.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise IncompatibleCheckpointError(f"{k}: shape {v.shape} != {tuple(own[k].shape)}")
    module.load_state_dict({k: torch.from_numpy(v.copy()).to(own[k].dtype) for k, v in sub.items()})


def save_separator(model: MaskNet, path: str | Path, extra: dict | None = None) -> None:
    meta = {"kind": "separator", "arch": model.arch.to_dict(), **(extra or {})}
    checkpoint.save(path, meta, module_tensors(model, "separator."))


def load_separator(path: str | Path) -> MaskNet:
    """Load a separator from either a separator-only file or a full training checkpoint."""
    meta, tensors = checkpoint.load(path)
    arch_d = meta.get("arch") or meta.get("separator_arch")
    if arch_d is None:
        raise IncompatibleCheckpointError(f"{path}: no separator architecture recorded")
    model = MaskNet(ArchDescriptor.from_dict(arch_d))
    load_module_tensors(model, tensors, "separator.")
    return model
