"""Alternating masker/discriminator optimization, supervised baseline and checkpoints."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from advunmix import checkpoint
from advunmix.data import Mixture, MixturePair, pair_index_batches, stack_pixels
from advunmix.errors import ConfigError, DivergenceError, IncompatibleCheckpointError
from advunmix.losses import (Discriminator, LossWeights, confusion_loss, cycle_loss, disc_loss,
                             energy_equity_loss, total_masker_loss)
from advunmix.remix import cycle, pairs_to_tensors, remix
from advunmix.separator import (ArchDescriptor, MaskNet, images_to_tensor, load_module_tensors,
                                module_tensors, separate)

log = logging.getLogger(__name__)

STATE_FORMAT = "advunmix-train-state/1"


class Mode(enum.Enum):
    Unsupervised = "unsupervised"
    Supervised = "supervised"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        for m in cls:
            if str(value).lower() in (m.value, m.name.lower()):
                return m
        raise ConfigError(f"unknown mode {value!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    mask_steps_per_disc_step: int = 4
    alpha: float = 5.0
    beta: float = 5.0
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    mode: Mode = Mode.Unsupervised
    cycle_norm: str = "l1"
    use_cycle_loss: bool = True  # False drops L_C from the masker objective (ablation)
    base_channels: int = 64
    disc_learning_rate: float | None = None  # None: same as learning_rate
    max_steps: int | None = None  # stop early after this many train steps

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        for name in ("mask_steps_per_disc_step", "batch_size", "epochs", "base_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate < 0 or (self.disc_learning_rate is not None
                                      and self.disc_learning_rate < 0):
            raise ConfigError("learning rates must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.cycle_norm not in ("l1", "l2"):
            raise ConfigError(f"cycle_norm must be l1 or l2, got {self.cycle_norm!r}")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def d_lr(self) -> float:
        return self.learning_rate if self.disc_learning_rate is None else self.disc_learning_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam with explicit, checkpointable moment buffers and an update counter."""

    def __init__(self, params: Sequence[torch.Tensor], lr: float, betas=(0.5, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor]) -> None:
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))


@dataclass
class StepReport:
    step: int
    l_c: float
    l_m: float
    l_e: float
    l_d: float
    l_total: float
    mean_mask: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    separator: MaskNet
    discriminator: Discriminator
    sep_opt: Adam
    disc_opt: Adam
    step: int = 0
    data_seed: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def mask_updates(self) -> int:
        return self.sep_opt.t

    @property
    def disc_updates(self) -> int:
        return self.disc_opt.t


def new_state(arch: ArchDescriptor, cfg: TrainConfig) -> TrainState:
    sep = MaskNet(arch, seed=cfg.seed)
    disc = Discriminator(arch, seed=cfg.seed + 1)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return TrainState(
        separator=sep, discriminator=disc,
        sep_opt=Adam(list(sep.parameters()), cfg.learning_rate, betas),
        disc_opt=Adam(list(disc.parameters()), cfg.d_lr, betas),
        data_seed=cfg.seed,
    )


def masker_losses(state: TrainState, y1: torch.Tensor, y2: torch.Tensor, cfg: TrainConfig
                  ) -> dict[str, torch.Tensor]:
    """Forward pass of the full masker objective on one batch of pairs."""
    rb = remix(y1, y2, state.separator)
    cb = cycle(rb, state.separator)
    l_c = cycle_loss(y1, y2, cb.y1_bar, cb.y2_bar, cfg.cycle_norm)
    if not cfg.use_cycle_loss:
        l_c = l_c.detach()
    l_m = confusion_loss(state.discriminator, torch.cat([rb.z1, rb.z2]))
    ys = torch.cat([y1, y2])
    masks = torch.cat([rb.sep1.mask, rb.sep2.mask])
    l_e = energy_equity_loss(ys, masks)
    l_total = total_masker_loss(l_c, l_m, l_e, cfg.weights)
    return {"l_c": l_c, "l_m": l_m, "l_e": l_e, "l_total": l_total, "mean_mask": masks.mean()}


def masker_update(state: TrainState, y1: torch.Tensor, y2: torch.Tensor, cfg: TrainConfig
                  ) -> dict[str, float]:
    losses = masker_losses(state, y1, y2, cfg)
    grads = torch.autograd.grad(losses["l_total"], state.sep_opt.params)
    state.sep_opt.step(grads)
    return {k: v.item() for k, v in losses.items()}


def disc_update(state: TrainState, y1: torch.Tensor, y2: torch.Tensor) -> float:
    with torch.no_grad():
        rb = remix(y1, y2, state.separator)
        fakes = torch.cat([rb.z1, rb.z2])
    l_d = disc_loss(state.discriminator, torch.cat([y1, y2]), fakes)
    value = l_d.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite l_d = {value}", {"step": state.step})
    grads = torch.autograd.grad(l_d, state.disc_opt.params)
    state.disc_opt.step(grads)
    return value


def train_step(state: TrainState, batch: Sequence[MixturePair] | tuple[torch.Tensor, torch.Tensor],
               cfg: TrainConfig) -> tuple[TrainState, StepReport]:
    """``mask_steps_per_disc_step`` masker updates, then one discriminator update.

    ``batch`` is a list of pairs or an already stacked ``(y1, y2)`` tensor pair.
    The same batch feeds every update of the step.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], torch.Tensor):
        y1, y2 = batch
    else:
        if not batch:
            raise ConfigError("empty batch")
        y1, y2 = pairs_to_tensors(batch, next(state.separator.parameters()).dtype)
    try:
        for _ in range(cfg.mask_steps_per_disc_step):
            m = masker_update(state, y1, y2, cfg)
        l_d = disc_update(state, y1, y2)
    except DivergenceError as e:
        e.snapshot.setdefault("step", state.step)
        raise
    state.step += 1
    report = StepReport(step=state.step, l_c=m["l_c"], l_m=m["l_m"], l_e=m["l_e"], l_d=l_d,
                        l_total=m["l_total"], mean_mask=m["mean_mask"])
    return state, report


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil((n // 2) / batch_size)


def fit(state: TrainState, mixtures: np.ndarray | Sequence[Mixture], cfg: TrainConfig,
        steps: int | None = None, metrics_path: str | Path | None = None,
        callback: Callable[[TrainState, StepReport], None] | None = None) -> TrainState:
    """Unsupervised training from ``state.step`` onward.

    Only mixture pixels are used. Without ``steps`` the run ends after
    ``cfg.epochs`` epochs (or ``cfg.max_steps`` if set). Batch order is a pure
    function of (data seed, step), so a resumed state continues the same stream.
    """
    ys = mixtures if isinstance(mixtures, np.ndarray) else stack_pixels(mixtures)
    dtype = next(state.separator.parameters()).dtype
    all_y = images_to_tensor(ys, dtype)
    per_epoch = steps_per_epoch(len(ys), cfg.batch_size)
    end = per_epoch * cfg.epochs if steps is None else state.step + steps
    if steps is None and cfg.max_steps is not None:
        end = min(end, cfg.max_steps)
    log_f = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        cached_epoch, batches = None, None
        while state.step < end:
            epoch, k = divmod(state.step, per_epoch)
            if epoch != cached_epoch:
                batches = pair_index_batches(len(ys), cfg.batch_size, state.data_seed, epoch)
                cached_epoch = epoch
            idx = torch.from_numpy(batches[k])
            state, report = train_step(state, (all_y[idx[:, 0]], all_y[idx[:, 1]]), cfg)
            if log_f:
                log_f.write(report.to_json() + "\n")
            if callback:
                callback(state, report)
    finally:
        if log_f:
            log_f.close()
    return state


# ---------------------------------------------------------------- supervised baseline

def supervised_loss(model: MaskNet, y: torch.Tensor, x_ref: torch.Tensor, b_ref: torch.Tensor
                    ) -> torch.Tensor:
    r = separate(model, y)
    return (r.x_hat - x_ref).abs().mean() + (r.b_hat - b_ref).abs().mean()


def train_supervised(dataset: Sequence[Mixture], cfg: TrainConfig, model: MaskNet | None = None,
                     steps: int | None = None,
                     callback: Callable[[int, float], None] | None = None) -> MaskNet:
    """Regress T(y) onto the weighted X component and y - T(y) onto the B component."""
    if not dataset:
        raise ConfigError("empty dataset")
    if any(m.ground_truth is None for m in dataset):
        raise ConfigError("supervised training needs ground truth on every mixture")
    ys = stack_pixels(dataset)
    comps = [m.components() for m in dataset]
    if model is None:
        h, w, c = ys.shape[1:]
        model = MaskNet(ArchDescriptor(h, w, c, cfg.base_channels), seed=cfg.seed)
    dtype = next(model.parameters()).dtype
    y_all = images_to_tensor(ys, dtype)
    x_all = images_to_tensor(np.stack([c[0] for c in comps]), dtype)
    b_all = images_to_tensor(np.stack([c[1] for c in comps]), dtype)
    opt = Adam(list(model.parameters()), cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2))
    n = len(ys)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs if steps is None else steps
    if steps is None and cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    perm = None
    for s in range(total):
        epoch, k = divmod(s, per_epoch)
        if k == 0:
            perm = torch.from_numpy(np.random.default_rng([cfg.seed, epoch]).permutation(n))
        idx = perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]
        loss = supervised_loss(model, y_all[idx], x_all[idx], b_all[idx])
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite supervised loss at step {s}", {"step": s})
        opt.step(torch.autograd.grad(loss, opt.params))
        if callback:
            callback(s, loss.item())
    return model


# ---------------------------------------------------------------- checkpoints

def state_to_container(state: TrainState, cfg: TrainConfig | None = None
                       ) -> tuple[dict, dict[str, np.ndarray]]:
    tensors = module_tensors(state.separator, "separator.")
    tensors.update(module_tensors(state.discriminator, "discriminator."))
    for tag, opt in (("sep", state.sep_opt), ("disc", state.disc_opt)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            tensors[f"adam.{tag}.{i}.m"] = m.detach().float().numpy()
            tensors[f"adam.{tag}.{i}.v"] = v.detach().float().numpy()
    meta = {
        "kind": "train_state",
        "format": STATE_FORMAT,
        "separator_arch": state.separator.arch.to_dict(),
        "discriminator_arch": state.discriminator.arch.to_dict(),
        "step": state.step,
        "data_seed": state.data_seed,
        "adam": {tag: {"t": o.t, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps}
                 for tag, o in (("sep", state.sep_opt), ("disc", state.disc_opt))},
        "config": cfg.to_dict() if cfg is not None else None,
    }
    return meta, tensors


def checkpoint_save(state: TrainState, path: str | Path, cfg: TrainConfig | None = None) -> None:
    meta, tensors = state_to_container(state, cfg)
    checkpoint.save(path, meta, tensors)


def checkpoint_load(path: str | Path) -> TrainState:
    meta, tensors = checkpoint.load(path)
    if meta.get("format") != STATE_FORMAT:
        raise IncompatibleCheckpointError(
            f"{path}: expected {STATE_FORMAT}, found {meta.get('format', meta.get('kind'))!r}")
    sep = MaskNet(ArchDescriptor.from_dict(meta["separator_arch"]))
    disc = Discriminator(ArchDescriptor.from_dict(meta["discriminator_arch"]))
    load_module_tensors(sep, tensors, "separator.")
    load_module_tensors(disc, tensors, "discriminator.")
    opts = {}
    for tag, module in (("sep", sep), ("disc", disc)):
        a = meta["adam"][tag]
        opt = Adam(list(module.parameters()), a["lr"], (a["beta1"], a["beta2"]), a["eps"])
        opt.t = int(a["t"])
        for i, p in enumerate(opt.params):
            try:
                m, v = tensors[f"adam.{tag}.{i}.m"], tensors[f"adam.{tag}.{i}.v"]
            except KeyError:
                raise IncompatibleCheckpointError(f"{path}: missing Adam moments for {tag}.{i}") from None
            opt.m[i] = torch.from_numpy(m.copy()).to(p.dtype).reshape(p.shape)
            opt.v[i] = torch.from_numpy(v.copy()).to(p.dtype).reshape(p.shape)
        opts[tag] = opt
    return TrainState(separator=sep, discriminator=disc, sep_opt=opts["sep"],
                      disc_opt=opts["disc"], step=int(meta["step"]),
                      data_seed=int(meta["data_seed"]))


def checkpoint_config(path: str | Path) -> TrainConfig | None:
    meta, _ = checkpoint.load(path)
    return TrainConfig.from_dict(meta["config"]) if meta.get("config") else None


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()

