"""PSNR / SSIM scoring of separations with one global source-permutation choice."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from advunmix.data import Mixture, stack_pixels
from advunmix.errors import ConfigError, DimensionError
from advunmix.separator import MaskNet, separate_images

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


class Assignment(enum.Enum):
    Direct = "direct"
    Swapped = "swapped"


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(est, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(est, ref, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) on a unit dynamic range, capped at ``cap`` dB."""
    a, b = _pair(est, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes of an (H, W, ...) array."""
    k = len(g)
    h, w = img.shape[:2]
    rows = sum(g[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(est, ref, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean single-scale SSIM with a Gaussian window, averaged over channels.

    Images are (H, W) or (H, W, C) on a unit dynamic range; only windows that fit
    entirely inside the image are scored.
    """
    a, b = _pair(est, ref)
    if a.ndim not in (2, 3):
        raise DimensionError(f"expected (H, W) or (H, W, C), got {a.shape}")
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise ConfigError(f"image {a.shape[:2]} smaller than the {win_size}x{win_size} window")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    g = gaussian_window(win_size, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    if s.ndim == 3:
        return float(np.mean([s[..., c].mean() for c in range(s.shape[-1])]))
    return float(s.mean())


@dataclass
class EvalReport:
    psnr_x: float
    psnr_b: float
    ssim_x: float
    ssim_b: float
    psnr_mean: float
    ssim_mean: float
    assignment: Assignment
    n_examples: int

    FIELDS = ("psnr_x", "psnr_b", "ssim_x", "ssim_b", "psnr_mean", "ssim_mean",
              "assignment", "n_examples")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["assignment"] = self.assignment.value
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())

    def csv_header(self) -> str:
        return ",".join(self.FIELDS)

    def csv_row(self) -> str:
        d = self.as_dict()
        return ",".join(f"{d[k]:.6f}" if isinstance(d[k], float) else str(d[k]) for k in self.FIELDS)


def score_estimates(x_hat: np.ndarray, b_hat: np.ndarray, x_ref: np.ndarray, b_ref: np.ndarray,
                    ssim_window: int | None = 11) -> EvalReport:
    """Score (N, H, W, C) estimates against references under one global assignment.

    The assignment with the higher mean PSNR over the whole set wins; ties keep Direct.
    With ``ssim_window=None`` SSIM is skipped and reported as NaN.
    """
    n = len(x_hat)
    if n == 0:
        raise ConfigError("nothing to evaluate")
    pxx = np.array([psnr(x_hat[i], x_ref[i]) for i in range(n)])
    pbb = np.array([psnr(b_hat[i], b_ref[i]) for i in range(n)])
    pxb = np.array([psnr(x_hat[i], b_ref[i]) for i in range(n)])
    pbx = np.array([psnr(b_hat[i], x_ref[i]) for i in range(n)])
    direct = (pxx.mean() + pbb.mean()) / 2
    swapped = (pxb.mean() + pbx.mean()) / 2
    if swapped > direct:
        assignment, est_x, est_b, p_x, p_b = Assignment.Swapped, b_hat, x_hat, pbx, pxb
    else:
        assignment, est_x, est_b, p_x, p_b = Assignment.Direct, x_hat, b_hat, pxx, pbb
    if ssim_window is None:
        s_x = s_b = float("nan")
    else:
        s_x = float(np.mean([ssim(est_x[i], x_ref[i], ssim_window) for i in range(n)]))
        s_b = float(np.mean([ssim(est_b[i], b_ref[i], ssim_window) for i in range(n)]))
    psnr_x, psnr_b = float(p_x.mean()), float(p_b.mean())
    return EvalReport(psnr_x=psnr_x, psnr_b=psnr_b, ssim_x=s_x, ssim_b=s_b,
                      psnr_mean=(psnr_x + psnr_b) / 2, ssim_mean=(s_x + s_b) / 2,
                      assignment=assignment, n_examples=n)


def reference_components(valset: Sequence[Mixture]) -> tuple[np.ndarray, np.ndarray]:
    if any(m.ground_truth is None for m in valset):
        raise ConfigError("evaluation needs ground truth on every mixture")
    comps = [m.components() for m in valset]
    return np.stack([c[0] for c in comps]), np.stack([c[1] for c in comps])


def evaluate(model: MaskNet, valset: Sequence[Mixture], ssim_window: int | None = 11) -> EvalReport:
    """Separate every mixture and score against its weighted ground-truth components."""
    if not valset:
        raise ConfigError("empty validation set")
    x_ref, b_ref = reference_components(valset)
    x_hat, b_hat = separate_images(model, stack_pixels(valset))
    return score_estimates(x_hat, b_hat, x_ref, b_ref, ssim_window)


def trivial_mask_report(valset: Sequence[Mixture], ssim_window: int | None = 11) -> EvalReport:
    """Score of the degenerate separation x_hat = y, b_hat = 0."""
    x_ref, b_ref = reference_components(valset)
    ys = stack_pixels(valset)
    return score_estimates(ys, np.zeros_like(ys), x_ref, b_ref, ssim_window)
