"""Command-line entry point: synth, train, separate, eval and grid."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import types
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from advunmix.data import (DatasetManifest, Profile, build_splits,
                           load_dataset, parse_bool, parse_key_values, read_rmxt, save_dataset,
                           write_rmxt)
from advunmix.errors import (AdvUnmixError, ConfigError, DataError, DimensionError,
                             DivergenceError)
from advunmix.metrics import evaluate
from advunmix.separator import ArchDescriptor, MaskNet, load_separator, save_separator, separate_images
from advunmix.trainer import (Mode, TrainConfig, checkpoint_load, checkpoint_save, fit, new_state,
                              steps_per_epoch, train_supervised)

log = logging.getLogger("advunmix")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

DATASET_KEYS = {"profile": str, "n_train": int, "n_val": int, "invert_intensity": parse_bool,
                "mnist_dir": str, "x_dir": str, "b_dir": str}
RUN_KEYS = {"checkpoint_every": int, "rows": int, "ssim_window": int}

# flag name -> config key
FLAG_KEYS = {"seed": "seed", "epochs": "epochs", "batch_size": "batch_size", "alpha": "alpha",
             "beta": "beta", "lr": "learning_rate", "mask_steps": "mask_steps_per_disc_step",
             "mode": "mode", "profile": "profile", "rows": "rows"}


def _converter(hint):
    args = typing.get_args(hint)
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        inner = _converter(next(a for a in args if a is not type(None)))
        return lambda v: None if str(v).lower() == "none" else inner(v)
    if hint is bool:
        return parse_bool
    return hint


def _train_converters() -> dict:
    hints = typing.get_type_hints(TrainConfig)
    return {f.name: _converter(hints[f.name]) for f in fields(TrainConfig)}


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """Merge a flat key=value file with CLI overrides (overrides win) into typed values."""
    raw: dict = {}
    if config_path:
        try:
            raw.update(parse_key_values(Path(config_path).read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from None
    raw.update({k: v for k, v in overrides.items() if v is not None})
    conv = {**_train_converters(), **DATASET_KEYS, **RUN_KEYS}
    unknown = sorted(set(raw) - set(conv))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    out = {}
    for k, v in raw.items():
        try:
            out[k] = conv[k](v) if isinstance(v, str) else v
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {k}: {v!r} ({e})") from None
    return out


def train_config(values: dict) -> TrainConfig:
    return TrainConfig(**{k: v for k, v in values.items() if k in _train_converters()})


def manifest_from(values: dict) -> DatasetManifest:
    profile = values.get("profile", Profile.MnistDigits.value)
    kw = {k: values[k] for k in ("n_train", "n_val", "invert_intensity", "seed") if k in values}
    return DatasetManifest.for_profile(profile, **kw)


def _load_split(path: str, name: str):
    manifest, splits = load_dataset(path)
    if not splits.get(name):
        raise DataError(f"{path}: split {name!r} is empty")
    return manifest, splits[name]


# ---------------------------------------------------------------- commands

def cmd_synth(args, values) -> int:
    manifest = manifest_from(values)
    splits = build_splits(manifest, mnist_dir=values.get("mnist_dir", args.data),
                          x_dir=values.get("x_dir"), b_dir=values.get("b_dir"))
    digest = save_dataset(args.out, manifest, splits)
    print(digest)
    return EXIT_OK


def cmd_train(args, values) -> int:
    cfg = train_config(values)
    manifest, train = _load_split(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(cfg.to_dict().items())), encoding="utf-8")
    h, w, c = train[0].pixels.shape
    arch = ArchDescriptor(h, w, c, cfg.base_channels)
    if cfg.mode is Mode.Supervised:
        model = train_supervised(train, cfg, model=MaskNet(arch, seed=cfg.seed))
        save_separator(model, out / "model.rmxc", {"mode": cfg.mode.value})
        return EXIT_OK
    if args.checkpoint:
        state = checkpoint_load(args.checkpoint)
        if state.separator.arch != arch:
            raise ConfigError(f"checkpoint architecture {state.separator.arch} does not match data {arch}")
    else:
        state = new_state(arch, cfg)
    every = values.get("checkpoint_every") or steps_per_epoch(len(train), cfg.batch_size)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def on_step(st, report):
        if st.step % every == 0:
            checkpoint_save(st, ckpt_dir / f"step_{st.step:08d}.ckpt", cfg)
            log.info("step %d l_total=%.4f mean_mask=%.3f", st.step, report.l_total, report.mean_mask)

    try:
        state = fit(state, train, cfg, metrics_path=out / "metrics.jsonl", callback=on_step)
    except DivergenceError as e:
        (out / "divergence.json").write_text(json.dumps(e.snapshot, sort_keys=True), encoding="utf-8")
        raise
    checkpoint_save(state, out / "state.ckpt", cfg)
    save_separator(state.separator, out / "model.rmxc", {"mode": cfg.mode.value, "step": state.step})
    return EXIT_OK


def _read_inputs(path: Path) -> tuple[np.ndarray, bool]:
    if path.suffix == ".rmxt":
        return read_rmxt(path), False
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L" if im.mode in ("L", "1", "I", "F") else "RGB"), np.float32) / 255.0
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    return (arr[..., None] if arr.ndim == 2 else arr)[None], True


def _to_png(img: np.ndarray) -> Image.Image:
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)  # display only
    return Image.fromarray(u8[..., 0] if u8.shape[-1] == 1 else u8)


def cmd_separate(args, values) -> int:
    model = load_separator(args.checkpoint)
    path = Path(args.input)
    ys, is_image = _read_inputs(path)
    if ys.shape[1:] != (model.arch.height, model.arch.width, model.arch.channels):
        raise DimensionError(f"input shape {ys.shape[1:]} does not match model {model.arch}")
    x_hat, b_hat = separate_images(model, ys)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rmxt(out / "x_hat.rmxt", x_hat)
    write_rmxt(out / "b_hat.rmxt", b_hat)
    if is_image:
        _to_png(x_hat[0]).save(out / f"{path.stem}_x.png")
        _to_png(b_hat[0]).save(out / f"{path.stem}_b.png")
    return EXIT_OK


def _check_arch(model: MaskNet, mixtures) -> None:
    shape = mixtures[0].pixels.shape
    if shape != (model.arch.height, model.arch.width, model.arch.channels):
        raise ConfigError(f"model expects {model.arch}, dataset images are {shape}")


def cmd_eval(args, values) -> int:
    model = load_separator(args.checkpoint)
    _, val = _load_split(args.data, "val")
    _check_arch(model, val)
    window = values.get("ssim_window")
    if window is None:
        window = 11 if min(model.arch.height, model.arch.width) >= 11 else None
        if window is None:
            log.warning("images are smaller than the SSIM window; SSIM is reported as nan")
    report = evaluate(model, val, ssim_window=window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")
    print(report.to_text(), end="")
    return EXIT_OK


def grid_image(model: MaskNet, mixtures, rows: int, seed: int) -> np.ndarray:
    """Rows of Mix | Ours-x | Ours-b | GT-x | GT-b, as one (rows*H, 5*W, C) float array."""
    if any(m.ground_truth is None for m in mixtures):
        raise DataError("grid needs ground truth on every mixture")
    rows = min(rows, len(mixtures))
    pick = np.sort(np.random.default_rng(seed).choice(len(mixtures), rows, replace=False))
    chosen = [mixtures[i] for i in pick]
    ys = np.stack([m.pixels for m in chosen])
    x_hat, b_hat = separate_images(model, ys)
    gx = np.stack([m.components()[0] for m in chosen])
    gb = np.stack([m.components()[1] for m in chosen])
    cols = [ys, x_hat, b_hat, gx, gb]
    return np.concatenate([np.concatenate([c[r] for c in cols], axis=1) for r in range(rows)], axis=0)


def cmd_grid(args, values) -> int:
    model = load_separator(args.checkpoint)
    _, val = _load_split(args.data, "val")
    _check_arch(model, val)
    img = grid_image(model, val, values.get("rows", 8), values.get("seed", 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _to_png(img).save(out)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "separate": cmd_separate,
            "eval": cmd_eval, "grid": cmd_grid}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advunmix", description="Adversarial unmix-and-remix image separation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file; flags take precedence")
        s.add_argument("--out", required=True)
        s.add_argument("--seed")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        if name == "synth":
            s.add_argument("--profile", choices=[pr.value for pr in Profile])
            s.add_argument("--data", help="MNIST IDX directory for the mnist profile")
        if name == "train":
            s.add_argument("--data", required=True, help="dataset directory written by synth")
            s.add_argument("--epochs")
            s.add_argument("--batch-size")
            s.add_argument("--alpha")
            s.add_argument("--beta")
            s.add_argument("--lr")
            s.add_argument("--mask-steps")
            s.add_argument("--mode", choices=[m.value for m in Mode])
            s.add_argument("--checkpoint", help="training state to resume from")
        if name in ("separate", "eval", "grid"):
            s.add_argument("--checkpoint", required=True, help="model or training state file")
        if name == "separate":
            s.add_argument("--input", required=True, help="an image file or an .rmxt blob")
        if name in ("eval", "grid"):
            s.add_argument("--data", required=True, help="dataset directory written by synth")
        if name == "grid":
            s.add_argument("--rows")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        overrides.update({key: getattr(args, flag) for flag, key in FLAG_KEYS.items()
                          if getattr(args, flag, None) is not None})
        values = resolve_config(args.config, overrides)
        return COMMANDS[args.command](args, values)
    except (ConfigError, DimensionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"training diverged: {e} {json.dumps(e.snapshot, sort_keys=True)}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AdvUnmixError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
