"""Paired-domain data: procedural glyphs, IDX datasets, background compositing."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigurationError, FormatError, UsageError
from .io import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, read_idx, read_netpbm, write_netpbm

MAX_GLYPH_CLASSES = 10


@dataclass(frozen=True)
class DomainBatch:
    """Images (N, C, H, W) in [0, 1] and optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigurationError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ConfigurationError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise UsageError("batch carries no labels")
        return int(self.labels.max()) + 1

    def unlabeled(self) -> "DomainBatch":
        """The label-stripped view handed to adaptation training."""
        return DomainBatch(self.images, None)

    def subset(self, idx) -> "DomainBatch":
        return DomainBatch(self.images[idx], None if self.labels is None else self.labels[idx])


class DatasetKind(str, enum.Enum):
    SYNTHETIC = "synthetic-glyphs"
    IDX = "idx-files"
    COMPOSITED = "composited"


@dataclass(frozen=True)
class DatasetSpec:
    kind: DatasetKind = DatasetKind.SYNTHETIC
    num_classes: int = 8
    image_shape: tuple[int, int, int] = (3, 16, 16)
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    blend: str = "add"


class DomainPair(NamedTuple):
    source_train: DomainBatch
    source_test: DomainBatch
    target_train: DomainBatch
    target_test: DomainBatch


# -- procedural glyphs ---------------------------------------------------------
def _segments(label: int) -> list[tuple[float, float, float, float]]:
    """Stroke segments of each glyph class in a unit box centred on 0."""
    s = 0.8
    box = [(-s, -s, s, -s), (s, -s, s, s), (s, s, -s, s), (-s, s, -s, -s)]
    if label == 0:
        return [(-s, 0, s, 0)]
    if label == 1:
        return [(0, -s, 0, s)]
    if label == 2:
        return [(-s, s, s, -s)]
    if label == 3:
        return [(-s, -s, s, s)]
    if label == 4:
        return [(-s, 0, s, 0), (0, -s, 0, s)]
    if label == 5:
        return [(-s, -s, s, s), (-s, s, s, -s)]
    if label == 6:
        return box
    if label == 7:
        n = 12
        ang = np.linspace(0, 2 * np.pi, n + 1)
        pts = [(s * np.cos(a), s * np.sin(a)) for a in ang]
        return [(*pts[i], *pts[i + 1]) for i in range(n)]
    if label == 8:
        return [(-s, s, 0, -s), (0, -s, s, s), (s, s, -s, s)]
    if label == 9:
        return [(-s, -s, -s, s), (-s, s, s, s)]
    raise ConfigurationError(f"glyph class {label} not defined (max {MAX_GLYPH_CLASSES - 1})")


def _render(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    half = size / 2.0
    scale = rng.uniform(0.6, 0.85) * half
    cx = half - 0.5 + rng.uniform(-1.5, 1.5)
    cy = half - 0.5 + rng.uniform(-1.5, 1.5)
    theta = rng.uniform(-0.2, 0.2)
    thick = rng.uniform(0.7, 1.3)
    intensity = rng.uniform(0.75, 1.0)
    cos, sin = np.cos(theta), np.sin(theta)
    dist = np.full((size, size), np.inf)
    for x0, y0, x1, y1 in _segments(label):
        ax, ay = cx + scale * (cos * x0 - sin * y0), cy + scale * (sin * x0 + cos * y0)
        bx, by = cx + scale * (cos * x1 - sin * y1), cy + scale * (sin * x1 + cos * y1)
        dx, dy = bx - ax, by - ay
        t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / max(dx * dx + dy * dy, 1e-12), 0.0, 1.0)
        d = np.hypot(xx - (ax + t * dx), yy - (ay + t * dy))
        dist = np.minimum(dist, d)
    return intensity * np.clip(thick - dist + 0.5, 0.0, 1.0)


def render_glyphs(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Grayscale glyph batch (N, 1, size, size) for the given class labels."""
    out = np.empty((len(labels), 1, size, size), dtype=np.float32)
    for i, lab in enumerate(labels):
        out[i, 0] = _render(int(lab), size, rng)
    return out


def balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    return labels.astype(np.int64)


def to_rgb(x: np.ndarray) -> np.ndarray:
    return np.repeat(x, 3, axis=1) if x.shape[1] == 1 else x


def colored_noise(n: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random RGB fields with fine-grain texture, shape (n, 3, h, w)."""
    coarse = rng.uniform(0.0, 1.0, size=(n, 3, 4, 4))
    ys = np.linspace(0, 3, h)
    xs = np.linspace(0, 3, w)
    y0 = np.minimum(np.floor(ys).astype(int), 2)
    x0 = np.minimum(np.floor(xs).astype(int), 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[:, :, y0][:, :, :, x0]
    c01 = coarse[:, :, y0][:, :, :, x0 + 1]
    c10 = coarse[:, :, y0 + 1][:, :, :, x0]
    c11 = coarse[:, :, y0 + 1][:, :, :, x0 + 1]
    smooth = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx)
    grain = rng.uniform(-0.15, 0.15, size=(n, 3, h, w))
    return np.clip(smooth + grain, 0.0, 1.0).astype(np.float32)


BLENDS = ("add", "absdiff")


def composite_background(x: DomainBatch, seed: int, backgrounds: np.ndarray | None = None,
                         blend: str = "add") -> DomainBatch:
    """Put each grayscale glyph on a random colour patch.

    ``add``: glyph + 0.5 * background, clipped (bright strokes stay bright).
    ``absdiff``: |background - glyph|, the MNIST-M recipe (strokes may invert).
    ``backgrounds`` optionally supplies real RGB images (M, 3, H', W') to crop
    patches from; procedural coloured noise is used otherwise.
    """
    if blend not in BLENDS:
        raise ConfigurationError(f"blend must be one of {BLENDS}, got {blend!r}")
    if x.images.shape[1] not in (1, 3):
        raise ConfigurationError(f"composite expects grayscale input, got {x.images.shape[1]} channels")
    gray = x.images[:, :1]
    n, _, h, w = gray.shape
    rng = np.random.default_rng(seed)
    if backgrounds is None:
        bg = colored_noise(n, h, w, rng)
    else:
        bg = np.empty((n, 3, h, w), dtype=np.float32)
        for i in range(n):
            src = backgrounds[rng.integers(len(backgrounds))]
            if src.shape[1] < h or src.shape[2] < w:
                raise ConfigurationError(f"background {src.shape} smaller than patch {(h, w)}")
            top = rng.integers(src.shape[1] - h + 1)
            left = rng.integers(src.shape[2] - w + 1)
            bg[i] = to_rgb(src[None, :, top:top + h, left:left + w])[0]
    out = np.clip(gray + 0.5 * bg, 0.0, 1.0) if blend == "add" else np.abs(bg - gray)
    return DomainBatch(out.astype(np.float32), x.labels)


def resize_nearest(x: DomainBatch, h: int, w: int) -> DomainBatch:
    if h < 1 or w < 1:
        raise ConfigurationError(f"target extents must be positive, got ({h}, {w})")
    _, _, hi, wi = x.images.shape
    rows = np.minimum((np.arange(h) * hi) // h, hi - 1)
    cols = np.minimum((np.arange(w) * wi) // w, wi - 1)
    return DomainBatch(x.images[:, :, rows][:, :, :, cols], x.labels)


def gen_synthetic_pair(spec: DatasetSpec = DatasetSpec()) -> DomainPair:
    """Clean glyphs (source) and the same glyph family over coloured noise (target).

    Source and target draw independent glyph instances; each split is class
    balanced and the whole pair is a pure function of ``spec.seed``.
    """
    if spec.blend not in BLENDS:
        raise ConfigurationError(f"blend must be one of {BLENDS}, got {spec.blend!r}")
    if not 2 <= spec.num_classes <= MAX_GLYPH_CLASSES:
        raise ConfigurationError(f"num_classes must be in 2..{MAX_GLYPH_CLASSES}")
    _, h, w = spec.image_shape
    if h != w:
        raise ConfigurationError("glyphs are square")
    root = np.random.default_rng(spec.seed)
    seeds = root.integers(0, 2 ** 31, size=6)
    parts = []
    for k, n in enumerate((spec.n_train, spec.n_test, spec.n_train, spec.n_test)):
        rng = np.random.default_rng(seeds[k])
        labels = balanced_labels(n, spec.num_classes, rng)
        gray = render_glyphs(labels, h, rng)
        batch = DomainBatch(gray, labels)
        if k >= 2:
            batch = composite_background(batch, int(seeds[4] + k), blend=spec.blend)
        else:
            batch = DomainBatch(to_rgb(gray), labels)
        parts.append(batch)
    return DomainPair(*parts)


def batches(x: DomainBatch, batch_size: int, seed: int, shuffle: bool = True) -> Iterator[DomainBatch]:
    """One epoch of mini-batches in a seed-determined order."""
    order = np.random.default_rng(seed).permutation(len(x)) if shuffle else np.arange(len(x))
    for i in range(0, len(x), batch_size):
        yield x.subset(order[i:i + batch_size])


# -- IDX -------------------------------------------------------------------------
def load_idx(images_path, labels_path=None, channels: int = 1) -> DomainBatch:
    """Read an IDX image file (and optional label file) into a batch scaled to [0, 1]."""
    imgs = read_idx(images_path, IDX_IMAGES_MAGIC)
    if imgs.ndim != 3:
        raise FormatError(f"expected 3-D image tensor, got {imgs.ndim}-D", path=images_path, offset=3)
    x = (imgs.astype(np.float32) / 255.0)[:, None]
    if channels == 3:
        x = to_rgb(x)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.ndim != 1 or len(labels) != len(x):
            raise FormatError(f"label count {labels.shape} does not match {len(x)} images", path=labels_path, offset=4)
    return DomainBatch(x, labels)


# -- dataset directories -----------------------------------------------------------
SPLITS = ("source_train", "source_test", "target_train", "target_test")


def export_pair(pair: DomainPair, out_dir) -> list[Path]:
    """Write every split as numbered PPM files plus one labels CSV per directory."""
    out_dir = Path(out_dir)
    written = []
    for name, batch in zip(SPLITS, pair):
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "labels.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["file", "label"])
            for i, img in enumerate(batch.images):
                fname = f"{i:05d}.{'ppm' if img.shape[0] == 3 else 'pgm'}"
                write_netpbm(d / fname, img)
                wr.writerow([fname, int(batch.labels[i])])
        written.append(d)
    return written


def load_split(split_dir) -> DomainBatch:
    split_dir = Path(split_dir)
    files, labels = [], []
    with open(split_dir / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            files.append(row["file"])
            labels.append(int(row["label"]))
    images = np.stack([to_rgb(read_netpbm(split_dir / f)[None])[0] for f in files])
    return DomainBatch(images.astype(np.float32), np.asarray(labels, dtype=np.int64))


def load_pair(root) -> DomainPair:
    root = Path(root)
    missing = [s for s in SPLITS if not (root / s / "labels.csv").exists()]
    if missing:
        raise UsageError(f"dataset directory {root} lacks splits {missing}")
    return DomainPair(*(load_split(root / s) for s in SPLITS))


def load_background_dir(path) -> np.ndarray:
    """Stack every PPM/PGM under ``path`` (all must share one size) for compositing."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise UsageError(f"no .ppm/.pgm images in {path}")
    return np.stack([to_rgb(read_netpbm(f)[None])[0] for f in files])
