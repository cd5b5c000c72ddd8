"""Unmix-and-remix: cross-combine separated sources of two mixtures, then undo it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from advunmix.data import MixturePair
from advunmix.errors import DimensionError
from advunmix.separator import MaskNet, SeparationResult, images_to_tensor, separate


@dataclass
class RemixBatch:
    z1: torch.Tensor
    z2: torch.Tensor
    sep1: SeparationResult
    sep2: SeparationResult
    provenance: tuple | None = None


@dataclass
class CycleBatch:
    y1_bar: torch.Tensor
    y2_bar: torch.Tensor
    x1_bar: torch.Tensor
    x2_bar: torch.Tensor
    b1_bar: torch.Tensor
    b2_bar: torch.Tensor
    mask_z1: torch.Tensor
    mask_z2: torch.Tensor


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"pair members differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def remix(y1: torch.Tensor, y2: torch.Tensor, model: MaskNet, provenance=None) -> RemixBatch:
    """z1 = x~1 + b~2 and z2 = x~2 + b~1. Results are not clipped."""
    _same_shape(y1, y2)
    s1, s2 = separate(model, y1), separate(model, y2)
    return RemixBatch(z1=s1.x_hat + s2.b_hat, z2=s2.x_hat + s1.b_hat, sep1=s1, sep2=s2,
                      provenance=provenance)


def cycle(remixed: RemixBatch, model: MaskNet) -> CycleBatch:
    """Separate z1, z2 again and swap the B parts back: y1_bar = T(z1) + (z2 - T(z2))."""
    t1, t2 = separate(model, remixed.z1), separate(model, remixed.z2)
    x1_bar, b2_bar = t1.x_hat, t1.b_hat
    x2_bar, b1_bar = t2.x_hat, t2.b_hat
    return CycleBatch(y1_bar=x1_bar + b1_bar, y2_bar=x2_bar + b2_bar,
                      x1_bar=x1_bar, x2_bar=x2_bar, b1_bar=b1_bar, b2_bar=b2_bar,
                      mask_z1=t1.mask, mask_z2=t2.mask)


def pairs_to_tensors(pairs: Sequence[MixturePair], dtype=torch.float32
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a batch of pairs into two NCHW tensors (y1 batch, y2 batch)."""
    y1 = images_to_tensor(np.stack([p.y1 for p in pairs]), dtype)
    y2 = images_to_tensor(np.stack([p.y2 for p in pairs]), dtype)
    return y1, y2


def remix_pairs(pairs: Sequence[MixturePair], model: MaskNet) -> RemixBatch:
    y1, y2 = pairs_to_tensors(pairs, next(model.parameters()).dtype)
    return remix(y1, y2, model, provenance=tuple(p.ids for p in pairs))
