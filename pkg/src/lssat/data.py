"""Dataset ingestion, deterministic splits, and synthetic texture data.

Images are PPM (P6/P3) or PGM (P5/P2), decoded without third-party
dependencies; PNG works too when Pillow is importable. Loaded samples
become (1, C=3, H, W) float64 frames in [0, 1] (grayscale replicates to
three channels), stacked into a (N, 1, 3, H, W) tensor after a bilinear
corner-aligned resize to the configured resolution.

The synthetic generator draws each class from a distinct texture family
(oriented stripes, smoothed noise, checkerboard, raw noise) and then
standardizes every image to the same mean and variance, so intensity
statistics carry no class signal; only texture does.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ldp import (RegionHistogramSet, ldp_histograms, ldp_image,
                  weighted_chi_square)


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM / PGM codec (binary and ascii variants)

def _read_header_tokens(raw: bytes, count: int):
    """First ``count`` whitespace/comment-delimited header tokens and the
    offset just past the single whitespace byte that ends the last one."""
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        if j == i:
            raise DataError("truncated netpbm header")
        tokens.append(raw[i:j])
        i = j
    return tokens, i + 1


def read_netpbm(path) -> np.ndarray:
    """Read a PGM into (H, W) uint8 or a PPM into (H, W, 3) uint8."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"{path}: not a PGM/PPM file (magic {magic!r})")
    channels = 3 if magic in (b"P3", b"P6") else 1
    (_, w, h, maxval), offset = _read_header_tokens(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    n = w * h * channels
    if magic in (b"P5", b"P6"):
        pixels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset)
    else:
        pixels = np.array(raw[offset - 1:].split()[:n], dtype=np.uint8)
    if pixels.size != n:
        raise DataError(f"{path}: expected {n} pixel values")
    if channels == 3:
        return pixels.reshape(h, w, 3)
    return pixels.reshape(h, w)


def write_netpbm(path, pixels: np.ndarray):
    """Write (H, W) uint8 as binary PGM or (H, W, 3) uint8 as binary PPM."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        magic = b"P5"
        h, w = pixels.shape
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
        h, w = pixels.shape[:2]
    else:
        raise DataError(f"cannot encode shape {pixels.shape} as PGM/PPM")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:
        raise DataError(f"{path}: PNG support needs the optional Pillow "
                        "dependency (pip install lssat[png])") from None
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image file: {path}")
    if path.suffix.lower() == ".png":
        return _read_png(path)
    return read_netpbm(path)


# ---------------------------------------------------------------------------
# resize and tensor assembly

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resample of (H, W) or (H, W, C) float data."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy = fy[:, :, None]
        fx = fx[:, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def to_frame(img: np.ndarray, size: int) -> np.ndarray:
    """uint8 (H,W) or (H,W,3) -> (1, 3, size, size) float64 in [0,1]."""
    arr = np.asarray(img, dtype=np.float64) / 255.0
    arr = bilinear_resize(arr, size, size)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.transpose(2, 0, 1)[None]


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    """In-memory sample collection: images (N, 1, 3, H, W) in [0,1] plus
    integer class labels (multiclass) or 0/1 attribute matrices
    (multi-attribute)."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    task: str = "multiclass"            # or "multi-attribute"

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        return Dataset(images=self.images[idx], labels=self.labels[idx],
                       num_classes=self.num_classes, task=self.task)

    def select_attribute(self, attr: int) -> "Dataset":
        """View one attribute column of a multi-attribute set as a binary
        multiclass problem."""
        if self.task != "multi-attribute":
            raise DataError("select_attribute needs a multi-attribute dataset")
        return Dataset(images=self.images,
                       labels=self.labels[:, attr].astype(np.int64),
                       num_classes=2, task="multiclass")


def load_dataset(root, labels_csv="labels.csv", image_size: int = 32,
                 num_classes: int | None = None) -> Dataset:
    """Load images listed in a labels CSV under ``root``.

    CSV header is either ``filename,label`` (multiclass) or
    ``filename,attr_0,...,attr_{K-1}`` (multi-attribute). Malformed rows
    are reported with their line number.
    """
    root = Path(root)
    csv_path = root / labels_csv
    if not csv_path.exists():
        raise DataError(f"missing labels CSV: {csv_path}")
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty CSV") from None
        if header[0] != "filename" or len(header) < 2:
            raise DataError(f"{csv_path}: header must start with 'filename'")
        multi_attr = len(header) > 2
        frames = []
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{csv_path}:{line_no}: expected "
                                f"{len(header)} fields, got {len(row)}")
            try:
                values = [int(v) for v in row[1:]]
            except ValueError:
                raise DataError(f"{csv_path}:{line_no}: non-integer label "
                                f"in {row[1:]}") from None
            frames.append(to_frame(read_image(root / row[0]), image_size))
            labels.append(values if multi_attr else values[0])
    if not frames:
        raise DataError(f"{csv_path}: no data rows")
    images = np.stack(frames)
    if multi_attr:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() > 1:
            raise DataError(f"{csv_path}: attribute bits must be 0/1")
        return Dataset(images=images, labels=labels,
                       num_classes=labels.shape[1], task="multi-attribute")
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"{csv_path}: label outside [0, {k})")
    return Dataset(images=images, labels=labels, num_classes=k)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not math.isclose(self.train + self.val + self.test, 1.0):
            raise DataError(f"split fractions must sum to 1, got "
                            f"{self.train}/{self.val}/{self.test}")


def split(dataset: Dataset, spec: SplitSpec, require_all: bool = True):
    """Seeded shuffle then contiguous slicing into (train, val, test)."""
    n = len(dataset)
    order = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=(spec.seed, n)))
    ).permutation(n)
    n_train = round(spec.train * n)
    n_val = round(spec.val * n)
    parts = (dataset.subset(order[:n_train]),
             dataset.subset(order[n_train:n_train + n_val]),
             dataset.subset(order[n_train + n_val:]))
    if require_all:
        for name, part in zip(("train", "val", "test"), parts):
            if len(part) == 0:
                raise DataError(f"split produced an empty {name} set")
    return parts


# ---------------------------------------------------------------------------
# synthetic texture classes

TEXTURE_FAMILIES = ("stripes", "smooth-noise", "checkerboard", "raw-noise")

SYNTH_MEAN = 0.5
SYNTH_STD = 0.12


def _stripes(rng, size):
    theta = rng.uniform(0, math.pi)
    period = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    return np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta))
                  / period + phase)


def _smooth_noise(rng, size):
    return ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=1.5,
                                   mode="wrap")


def _checkerboard(rng, size):
    cell = int(rng.integers(2, 5))
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    board = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    return board - 0.5


def _raw_noise(rng, size):
    return rng.normal(size=(size, size))


_GENERATORS = {
    "stripes": _stripes,
    "smooth-noise": _smooth_noise,
    "checkerboard": _checkerboard,
    "raw-noise": _raw_noise,
}


def _standardize(pattern: np.ndarray) -> np.ndarray:
    z = (pattern - pattern.mean()) / pattern.std()
    return np.clip(SYNTH_MEAN + SYNTH_STD * z, 0.0, 1.0)


def generate_synthetic(n_per_class: int, classes: int = 2, size: int = 32,
                       seed: int = 0, families=None) -> Dataset:
    """Balanced texture-classification dataset; class c uses texture
    family ``families[c]``. All images share mean/variance by
    construction, so a mean-intensity classifier stays near chance."""
    if families is None:
        families = TEXTURE_FAMILIES[:classes]
    if classes > len(TEXTURE_FAMILIES):
        raise DataError(f"at most {len(TEXTURE_FAMILIES)} classes supported")
    if len(families) != classes:
        raise DataError(f"need {classes} families, got {families}")
    for fam in families:
        if fam not in _GENERATORS:
            raise DataError(f"unknown texture family {fam!r}")
    images = np.empty((n_per_class * classes, 1, 3, size, size))
    labels = np.empty(n_per_class * classes, dtype=np.int64)
    i = 0
    for c, fam in enumerate(families):
        gen = _GENERATORS[fam]
        for j in range(n_per_class):
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence(entropy=(seed, c, j))))
            img = _standardize(gen(rng, size))
            images[i] = np.repeat(img[None, None], 3, axis=1)
            labels[i] = c
            i += 1
    return Dataset(images=images, labels=labels, num_classes=classes)


def save_dataset(dataset: Dataset, out_dir):
    """Write a dataset as 8-bit PPM files plus a labels CSV (the inverse
    of load_dataset up to quantization)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        if dataset.task == "multi-attribute":
            writer.writerow(["filename"] + [f"attr_{i}"
                                            for i in range(dataset.num_classes)])
        else:
            writer.writerow(["filename", "label"])
        for i in range(len(dataset)):
            name = f"sample_{i:05d}.ppm"
            rgb = np.clip(np.rint(dataset.images[i, 0] * 255), 0, 255)
            write_netpbm(out_dir / name, rgb.transpose(1, 2, 0).astype(np.uint8))
            if dataset.task == "multi-attribute":
                writer.writerow([name, *dataset.labels[i].tolist()])
            else:
                writer.writerow([name, int(dataset.labels[i])])
    return out_dir / "labels.csv"


def mean_intensity_baseline(train: Dataset, test: Dataset) -> float:
    """Accuracy of a nearest-class-mean classifier on the single feature
    'mean pixel intensity' (the guard that texture, not brightness, is
    what a real model must learn)."""
    feats_train = train.images.mean(axis=(1, 2, 3, 4))
    feats_test = test.images.mean(axis=(1, 2, 3, 4))
    centers = np.array([feats_train[train.labels == c].mean()
                        for c in range(train.num_classes)])
    preds = np.argmin(np.abs(feats_test[:, None] - centers[None, :]), axis=1)
    return float((preds == test.labels).mean())


def class_mean_ldp_distance(dataset: Dataset, k: int = 3, grid=(2, 2)) -> float:
    """Weighted chi-square between the class-mean LDP histograms of the
    first two classes (sanity signal that classes differ in texture)."""
    means = []
    template = None
    for c in range(2):
        idx = np.flatnonzero(dataset.labels == c)
        total = None
        for i in idx:
            gray8 = np.clip(np.rint(dataset.images[i, 0, 0] * 255),
                            0, 255).astype(np.uint8)
            template = ldp_histograms(ldp_image(gray8, k), grid=grid)
            counts = template.histograms.astype(np.float64)
            total = counts if total is None else total + counts
        means.append(total / len(idx))
    a = RegionHistogramSet(histograms=means[0], weights=template.weights,
                           codes=template.codes)
    b = RegionHistogramSet(histograms=means[1], weights=template.weights,
                           codes=template.codes)
    return weighted_chi_square(a, b)
