"""Source ingestion, deterministic mixture synthesis, on-disk datasets and pair batching."""

from __future__ import annotations

import enum
import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from advunmix.errors import ConfigError, DataError, DimensionError, FormatError, LengthError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
MNIST_PAD = 2

RMXT_MAGIC = b"RMXT"
RMXT_VERSION = 1
_RMXT_HEADER = struct.Struct("<4sHHHHI")  # 16 bytes

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class SourceLabel(enum.Enum):
    SourceX = "x"
    SourceB = "b"


class Profile(enum.Enum):
    MnistDigits = "mnist"
    ShoesBags = "shoesbags"
    Custom = "custom"
    ToyBars = "toybars"

    @classmethod
    def parse(cls, value: "str | Profile") -> "Profile":
        if isinstance(value, Profile):
            return value
        for p in cls:
            if value.lower() in (p.value, p.name.lower()):
                return p
        raise ConfigError(f"unknown profile {value!r}; expected one of {[p.value for p in cls]}")


# (H, W, C) for each profile; Custom takes whatever its folders decode to at 64x64x3.
PROFILE_SHAPES = {
    Profile.MnistDigits: (32, 32, 1),
    Profile.ShoesBags: (64, 64, 3),
    Profile.Custom: (64, 64, 3),
    Profile.ToyBars: (8, 8, 1),
}

PROFILE_DEFAULT_COUNTS = {
    Profile.MnistDigits: (25000, 5000),
    Profile.ShoesBags: (10000, 5000),
    Profile.Custom: (10000, 5000),
    Profile.ToyBars: (500, 100),
}


@dataclass(frozen=True)
class SourceImage:
    pixels: np.ndarray  # H x W x C float32 in [0, 1]
    source_label: SourceLabel
    origin_id: str


@dataclass(frozen=True)
class Mixture:
    pixels: np.ndarray
    ground_truth: tuple[SourceImage, SourceImage] | None = None
    weight: float = 0.5

    def components(self) -> tuple[np.ndarray, np.ndarray]:
        """The weighted source contributions actually present in ``pixels``."""
        if self.ground_truth is None:
            raise ConfigError("mixture carries no ground truth")
        x, b = self.ground_truth
        w = np.float32(self.weight)
        return w * x.pixels, w * b.pixels


@dataclass(frozen=True)
class MixturePair:
    y1: np.ndarray
    y2: np.ndarray
    ids: tuple[int, int]


@dataclass
class DatasetManifest:
    profile: Profile = Profile.MnistDigits
    n_train: int = 25000
    n_val: int = 5000
    seed: int = 0
    mixing_weight: float = 0.5
    invert_intensity: bool = False
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.profile = Profile.parse(self.profile)
        if self.n_train < 1 or self.n_val < 0:
            raise ConfigError("n_train must be >= 1 and n_val >= 0")
        if self.mixing_weight != 0.5:
            raise ConfigError("only equal-weight mixing (0.5) is supported")

    @classmethod
    def for_profile(cls, profile: "str | Profile", **overrides) -> "DatasetManifest":
        profile = Profile.parse(profile)
        n_train, n_val = PROFILE_DEFAULT_COUNTS[profile]
        kwargs = dict(profile=profile, n_train=n_train, n_val=n_val,
                      invert_intensity=profile is Profile.ShoesBags)
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def shape(self) -> tuple[int, int, int]:
        return PROFILE_SHAPES[self.profile]

    def to_text(self) -> str:
        lines = [
            f"profile = {self.profile.value}",
            f"n_train = {self.n_train}",
            f"n_val = {self.n_val}",
            f"seed = {self.seed}",
            f"mixing_weight = {self.mixing_weight!r}",
            f"invert_intensity = {str(self.invert_intensity).lower()}",
        ]
        for i, s in enumerate(self.skipped):
            lines.append(f"skipped.{i} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = parse_key_values(text)
        skipped = [kv.pop(k) for k in sorted((k for k in list(kv) if k.startswith("skipped.")),
                                            key=lambda k: int(k.split(".", 1)[1]))]
        try:
            return cls(
                profile=kv["profile"],
                n_train=int(kv["n_train"]),
                n_val=int(kv["n_val"]),
                seed=int(kv["seed"]),
                mixing_weight=float(kv["mixing_weight"]),
                invert_intensity=parse_bool(kv["invert_intensity"]),
                skipped=skipped,
            )
        except KeyError as e:
            raise FormatError(f"manifest is missing key {e.args[0]!r}") from None


def parse_key_values(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` text. Blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


# ---------------------------------------------------------------- IDX / MNIST

def _open_maybe_gz(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx_images(path: str | Path) -> np.ndarray:
    """Read an IDX3 image file into a uint8 array of shape (N, rows, cols)."""
    with _open_maybe_gz(Path(path)) as f:
        raw = f.read()
    if len(raw) < 16:
        raise LengthError(f"{path}: IDX image header truncated ({len(raw)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad IDX image magic {magic}, expected {IDX_IMAGES_MAGIC}")
    need = n * rows * cols
    if len(raw) - 16 < need:
        raise LengthError(f"{path}: expected {need} pixel bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=16).reshape(n, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    with _open_maybe_gz(Path(path)) as f:
        raw = f.read()
    if len(raw) < 8:
        raise LengthError(f"{path}: IDX label header truncated ({len(raw)} bytes)")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad IDX label magic {magic}, expected {IDX_LABELS_MAGIC}")
    if len(raw) - 8 < n:
        raise LengthError(f"{path}: expected {n} labels, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path,
              labels_path: str | Path) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def _find_idx_pair(path: Path, split: str) -> tuple[Path, Path]:
    if path.is_file():
        raise ConfigError(f"{path}: pass the directory holding the IDX files")
    stem = "train" if split == "train" else "t10k"
    cands = sorted(path.glob(f"{stem}-images*idx3-ubyte*")) or sorted(path.glob(f"{stem}-images*"))
    labs = sorted(path.glob(f"{stem}-labels*idx1-ubyte*")) or sorted(path.glob(f"{stem}-labels*"))
    if not cands or not labs:
        raise DataError(f"{path}: no {stem}-images/{stem}-labels IDX files found")
    return cands[0], labs[0]


def load_mnist(path: str | Path, split: str = "train") -> list[SourceImage]:
    """Load an MNIST IDX split as padded 32x32x1 sources.

    Digits 0-4 become ``SourceX``, digits 5-9 ``SourceB``. ``path`` is a directory
    containing ``{train,t10k}-images-idx3-ubyte[.gz]`` and the matching labels file.
    """
    img_path, lab_path = _find_idx_pair(Path(path), split)
    images = read_idx_images(img_path)
    labels = read_idx_labels(lab_path)
    if len(labels) != len(images):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    padded = np.pad(images, ((0, 0), (MNIST_PAD, MNIST_PAD), (MNIST_PAD, MNIST_PAD)))
    pixels = (padded.astype(np.float32) / np.float32(255.0))[..., None]
    return [
        SourceImage(pixels[i], SourceLabel.SourceX if labels[i] <= 4 else SourceLabel.SourceB,
                    f"mnist-{split}:{i}")
        for i in range(len(images))
    ]


# ---------------------------------------------------------------- image folders

def load_image_folder(path: str | Path, profile: DatasetManifest,
                      label: SourceLabel = SourceLabel.SourceX) -> list[SourceImage]:
    """Decode every image under ``path`` (sorted, recursive) to the profile shape.

    Undecodable files are skipped and appended to ``profile.skipped``.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"{root}: no image files found")
    h, w, c = profile.shape
    mode = "RGB" if c == 3 else "L"
    out = []
    for p in files:
        rel = p.relative_to(root).as_posix()
        try:
            with Image.open(p) as im:
                im = im.convert(mode).resize((w, h), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.uint8)
        except (UnidentifiedImageError, OSError, ValueError) as e:
            log.warning("skipping undecodable image %s: %s", p, e)
            profile.skipped.append(f"{root.name}/{rel}")
            continue
        arr = arr.reshape(h, w, c).astype(np.float32)
        if profile.invert_intensity:
            arr = np.float32(255.0) - arr
        out.append(SourceImage(arr / np.float32(255.0), label, f"{root.name}/{rel}"))
    if not out:
        raise DataError(f"{root}: no decodable images")
    return out


# ---------------------------------------------------------------- toy sources

def toy_bars(n: int, rng: np.random.Generator, size: int = 8, vertical: bool = False,
             max_bars: int = 3, low: float = 1.0) -> np.ndarray:
    """``n`` images of random full-length bars, shape (n, size, size, 1).

    Each image holds 1..max_bars distinct bars with intensities drawn from [low, 1].
    """
    imgs = np.zeros((n, size, size), dtype=np.float32)
    for i in range(n):
        k = rng.integers(1, max_bars + 1)
        lines = rng.choice(size, size=k, replace=False)
        vals = rng.uniform(low, 1.0, size=k).astype(np.float32)
        for line, v in zip(lines, vals):
            if vertical:
                imgs[i, :, line] = v
            else:
                imgs[i, line, :] = v
    return imgs[..., None]


def toy_sources(n: int, seed: int | Sequence[int], size: int = 8,
                prefix: str = "toy") -> tuple[list[SourceImage], list[SourceImage]]:
    """Horizontal-bar sources (X) and vertical-bar sources (B), ``n`` of each."""
    rng = np.random.default_rng(seed)
    xs = toy_bars(n, rng, size, vertical=False)
    bs = toy_bars(n, rng, size, vertical=True)
    return ([SourceImage(xs[i], SourceLabel.SourceX, f"{prefix}-x:{i}") for i in range(n)],
            [SourceImage(bs[i], SourceLabel.SourceB, f"{prefix}-b:{i}") for i in range(n)])


# ---------------------------------------------------------------- synthesis

def mix(x: np.ndarray, b: np.ndarray, weight: float = 0.5) -> np.ndarray:
    """The one mixing rule used everywhere: ``w*x + w*b`` in float32."""
    w = np.float32(weight)
    return w * x.astype(np.float32, copy=False) + w * b.astype(np.float32, copy=False)


def synthesize_mixtures(xs: Sequence[SourceImage], bs: Sequence[SourceImage],
                        manifest: DatasetManifest, count: int | None = None,
                        replace: bool | None = None,
                        seed: int | Sequence[int] | None = None) -> list[Mixture]:
    """Draw ``count`` (default ``manifest.n_train``) equal-weight mixtures.

    With ``replace`` False each source is used at most once. The default follows the
    profile: with replacement for MNIST digits, without for folder profiles.
    """
    if not xs or not bs:
        raise DataError("both source lists must be non-empty")
    count = manifest.n_train if count is None else count
    if replace is None:
        replace = manifest.profile in (Profile.MnistDigits, Profile.ToyBars)
    rng = np.random.default_rng(manifest.seed if seed is None else seed)
    if replace:
        xi = rng.integers(0, len(xs), size=count)
        bi = rng.integers(0, len(bs), size=count)
    else:
        if count > min(len(xs), len(bs)):
            raise DataError(f"cannot draw {count} mixtures without replacement from "
                            f"{len(xs)} X and {len(bs)} B sources")
        xi = rng.permutation(len(xs))[:count]
        bi = rng.permutation(len(bs))[:count]
    _check_shapes(xs[0].pixels, bs[0].pixels)
    w = manifest.mixing_weight
    return [Mixture(mix(xs[i].pixels, bs[j].pixels, w), (xs[i], bs[j]), w)
            for i, j in zip(xi.tolist(), bi.tolist())]


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"source shapes differ: {a.shape} vs {b.shape}")


def split_sources(sources: Sequence[SourceImage]) -> tuple[list[SourceImage], list[SourceImage]]:
    xs = [s for s in sources if s.source_label is SourceLabel.SourceX]
    bs = [s for s in sources if s.source_label is SourceLabel.SourceB]
    return xs, bs


def build_splits(manifest: DatasetManifest, *, mnist_dir: str | Path | None = None,
                 x_dir: str | Path | None = None, b_dir: str | Path | None = None
                 ) -> dict[str, list[Mixture]]:
    """Build disjoint train/val mixture lists for the manifest's profile."""
    ss = np.random.SeedSequence(manifest.seed)
    train_seed, val_seed = ss.spawn(2)
    p = manifest.profile
    if p is Profile.MnistDigits:
        if mnist_dir is None:
            raise ConfigError("mnist profile needs mnist_dir")
        sources = load_mnist(mnist_dir, "train")
        # the last sixth of the training file is held out (50k/10k for the standard file)
        n_hold = len(sources) // 6
        train_pool, val_pool = sources[:len(sources) - n_hold], sources[len(sources) - n_hold:]
        train = synthesize_mixtures(*split_sources(train_pool), manifest, manifest.n_train,
                                    replace=True, seed=train_seed)
        val = (synthesize_mixtures(*split_sources(val_pool), manifest, manifest.n_val,
                                   replace=True, seed=val_seed) if manifest.n_val else [])
        return {"train": train, "val": val}
    if p is Profile.ToyBars:
        h = manifest.shape[0]
        tx, tb = toy_sources(manifest.n_train, train_seed, h, prefix="toy-train")
        train = synthesize_mixtures(tx, tb, manifest, manifest.n_train, replace=False,
                                    seed=train_seed.spawn(1)[0])
        val = []
        if manifest.n_val:
            vx, vb = toy_sources(manifest.n_val, val_seed, h, prefix="toy-val")
            val = synthesize_mixtures(vx, vb, manifest, manifest.n_val, replace=False,
                                      seed=val_seed.spawn(1)[0])
        return {"train": train, "val": val}
    # folder profiles: one permutation per source, train takes the head, val the next block
    if x_dir is None or b_dir is None:
        raise ConfigError(f"{p.value} profile needs x_dir and b_dir")
    xs = load_image_folder(x_dir, manifest, SourceLabel.SourceX)
    bs = load_image_folder(b_dir, manifest, SourceLabel.SourceB)
    need = manifest.n_train + manifest.n_val
    if need > min(len(xs), len(bs)):
        raise DataError(f"need {need} unique sources per side, have {len(xs)} X and {len(bs)} B")
    rng = np.random.default_rng(train_seed)
    xp, bp = rng.permutation(len(xs)), rng.permutation(len(bs))
    w = manifest.mixing_weight

    def take(lo, hi):
        return [Mixture(mix(xs[i].pixels, bs[j].pixels, w), (xs[i], bs[j]), w)
                for i, j in zip(xp[lo:hi].tolist(), bp[lo:hi].tolist())]

    return {"train": take(0, manifest.n_train), "val": take(manifest.n_train, need)}


# ---------------------------------------------------------------- RMXT blobs

def write_rmxt(path: str | Path, tensors: np.ndarray) -> None:
    """Write an (N, H, W, C) float array as an RMXT blob (little-endian float32)."""
    arr = np.asarray(tensors)
    if arr.ndim != 4:
        raise DimensionError(f"RMXT expects (N, H, W, C), got shape {arr.shape}")
    n, h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_RMXT_HEADER.pack(RMXT_MAGIC, RMXT_VERSION, h, w, c, n))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_rmxt(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _RMXT_HEADER.size:
        raise LengthError(f"{path}: RMXT header truncated")
    magic, version, h, w, c, n = _RMXT_HEADER.unpack_from(raw)
    if magic != RMXT_MAGIC:
        raise FormatError(f"{path}: bad RMXT magic {magic!r}")
    if version != RMXT_VERSION:
        raise FormatError(f"{path}: unsupported RMXT version {version}")
    need = n * h * w * c * 4
    if len(raw) - _RMXT_HEADER.size != need:
        raise LengthError(f"{path}: expected {need} payload bytes, found {len(raw) - _RMXT_HEADER.size}")
    return np.frombuffer(raw, dtype="<f4", offset=_RMXT_HEADER.size).reshape(n, h, w, c).astype(np.float32)


def stack_pixels(mixtures: Sequence[Mixture]) -> np.ndarray:
    return np.stack([m.pixels for m in mixtures]).astype(np.float32, copy=False)


def save_dataset(out_dir: str | Path, manifest: DatasetManifest,
                 splits: dict[str, list[Mixture]]) -> str:
    """Write manifest + RMXT blobs; returns the dataset hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(manifest.to_text(), encoding="utf-8")
    for name, mixtures in splits.items():
        if not mixtures:
            continue
        write_rmxt(out / f"{name}.rmxt", stack_pixels(mixtures))
        if all(m.ground_truth is not None for m in mixtures):
            write_rmxt(out / f"{name}_x.rmxt", np.stack([m.ground_truth[0].pixels for m in mixtures]))
            write_rmxt(out / f"{name}_b.rmxt", np.stack([m.ground_truth[1].pixels for m in mixtures]))
            ids = "".join(f"{m.ground_truth[0].origin_id}\t{m.ground_truth[1].origin_id}\n"
                          for m in mixtures)
            (out / f"{name}_origins.txt").write_text(ids, encoding="utf-8")
    return dataset_hash(out)


def load_dataset(path: str | Path) -> tuple[DatasetManifest, dict[str, list[Mixture]]]:
    root = Path(path)
    mf = root / "manifest.txt"
    if not mf.is_file():
        raise DataError(f"{root}: no manifest.txt")
    manifest = DatasetManifest.from_text(mf.read_text(encoding="utf-8"))
    splits: dict[str, list[Mixture]] = {}
    for name in ("train", "val"):
        blob = root / f"{name}.rmxt"
        if not blob.exists():
            splits[name] = []
            continue
        ys = read_rmxt(blob)
        gt_x, gt_b = root / f"{name}_x.rmxt", root / f"{name}_b.rmxt"
        if gt_x.exists() and gt_b.exists():
            xs, bs = read_rmxt(gt_x), read_rmxt(gt_b)
            ids = (root / f"{name}_origins.txt").read_text(encoding="utf-8").splitlines()
            if not (len(xs) == len(bs) == len(ys) == len(ids)):
                raise FormatError(f"{root}: {name} blobs disagree in length")
            splits[name] = [
                Mixture(ys[i], (SourceImage(xs[i], SourceLabel.SourceX, ids[i].split("\t")[0]),
                                SourceImage(bs[i], SourceLabel.SourceB, ids[i].split("\t")[1])),
                        manifest.mixing_weight)
                for i in range(len(ys))
            ]
        else:
            splits[name] = [Mixture(ys[i], None, manifest.mixing_weight) for i in range(len(ys))]
    return manifest, splits


def dataset_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(path).iterdir()):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- batching

def epoch_pairs(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled disjoint pairing of ``range(n)`` for one epoch, shape (n // 2, 2)."""
    if n < 2:
        raise DataError("need at least two mixtures to form a pair")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[: 2 * (n // 2)].reshape(-1, 2)


def pair_index_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    pairs = epoch_pairs(n, seed, epoch)
    return [pairs[i:i + batch_size] for i in range(0, len(pairs), batch_size)]


def batch_pairs(dataset: Sequence[Mixture], batch_size: int, seed: int,
                epochs: int | None = 1) -> Iterator[list[MixturePair]]:
    """Yield batches of mixture pairs; each epoch reshuffles, odd leftovers are dropped.

    ``epochs=None`` streams forever.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(dataset) < 2:
        raise DataError("need at least two mixtures to form a pair")
    epoch = 0
    while epochs is None or epoch < epochs:
        for idx in pair_index_batches(len(dataset), batch_size, seed, epoch):
            yield [MixturePair(dataset[i].pixels, dataset[j].pixels, (int(i), int(j)))
                   for i, j in idx.tolist()]
        epoch += 1
