"""Datasets: CIFAR binary files, a synthetic mirror-pair glyph set, subsets.

Images are held raw as float32 ``N x H x W x 3`` in [0, 1]; normalisation
with the train split's per-channel mean/std is applied per batch so input
augmentation can work in pixel space.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .checkpoint import load_tensors, save_tensors

CIFAR_SIDE = 32
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE * 3

_CIFAR = {
    "cifar10": {
        "label_bytes": 1,
        "classes": 10,
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
    },
    "cifar100": {"label_bytes": 2, "classes": 100, "train": ["train.bin"], "test": ["test.bin"]},
}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} do not match {self.labels.shape[0]} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.mean is None:
            self.mean, self.std = channel_stats(self.images)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return ((images - self.mean) / self.std).astype(np.float32)

    def with_stats_of(self, other: "Dataset") -> "Dataset":
        return replace(self, mean=other.mean, std=other.std)


def channel_stats(images: np.ndarray):
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


# --- CIFAR binary records -----------------------------------------------------


def decode_cifar_records(blob: bytes, variant: str):
    """Parse raw CIFAR records into (uint8 images NHWC, fine labels, coarse labels)."""
    spec = _CIFAR[variant]
    rec = spec["label_bytes"] + CIFAR_PIXELS
    if len(blob) % rec:
        raise DataError(f"{variant}: {len(blob)} bytes is not a whole number of {rec}-byte records")
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, spec["label_bytes"] - 1].astype(np.int64)
    coarse = arr[:, 0].astype(np.int64) if spec["label_bytes"] == 2 else None
    if labels.size and labels.max() >= spec["classes"]:
        raise DataError(f"{variant}: label {labels.max()} out of range [0, {spec['classes']})")
    # planes are R, G, B, each 32x32 row-major
    pixels = arr[:, spec["label_bytes"]:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(pixels), labels, coarse


def encode_cifar_records(images_u8: np.ndarray, labels, variant: str, coarse=None) -> bytes:
    spec = _CIFAR[variant]
    n = images_u8.shape[0]
    planes = np.asarray(images_u8, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(n, CIFAR_PIXELS)
    head = [np.asarray(labels, dtype=np.uint8).reshape(n, 1)]
    if spec["label_bytes"] == 2:
        c = np.zeros(n, dtype=np.uint8) if coarse is None else np.asarray(coarse, dtype=np.uint8)
        head.insert(0, c.reshape(n, 1))
    return np.concatenate(head + [planes], axis=1).tobytes()


def load_cifar(path: Union[str, Path], variant: str = "cifar10", split: str = "train") -> Dataset:
    """Load a CIFAR split from a file or from the standard binary directory.

    For a directory, the usual file names are used (``data_batch_*.bin`` /
    ``test_batch.bin`` or ``train.bin`` / ``test.bin``). Pixels are scaled to
    [0, 1]; the fine label is used for CIFAR-100.
    """
    if variant not in _CIFAR:
        raise DataError(f"unknown CIFAR variant {variant!r}")
    path = Path(path)
    if path.is_dir():
        files = [path / f for f in _CIFAR[variant][split]]
    else:
        files = [path]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise DataError(f"missing CIFAR files: {missing}")
    blob = b"".join(f.read_bytes() for f in files)
    pixels, labels, _ = decode_cifar_records(blob, variant)
    images = pixels.astype(np.float32) / 255.0
    return Dataset(images, labels, _CIFAR[variant]["classes"], split=split, name=variant)


def load_cifar_splits(path, variant="cifar10"):
    train = load_cifar(path, variant, "train")
    test = load_cifar(path, variant, "test").with_stats_of(train)
    return train, test


# --- tensor files ------------------------------------------------------------


def save_dataset(path, ds: Dataset) -> None:
    save_tensors(
        path,
        {
            "images": ds.images,
            "labels": ds.labels.astype(np.float32).reshape(-1, 1, 1, 1),
            "num_classes": np.full((1, 1, 1, 1), ds.num_classes, dtype=np.float32),
        },
    )


def load_dataset(path, split: str = "train") -> Dataset:
    t = load_tensors(path)
    try:
        images, labels = t["images"], t["labels"]
    except KeyError as exc:
        raise DataError(f"{path}: missing tensor {exc}") from None
    num_classes = int(t["num_classes"].reshape(-1)[0]) if "num_classes" in t else int(labels.max()) + 1
    return Dataset(images, labels.reshape(-1).astype(np.int64), num_classes, split=split, name=Path(path).stem)


def load_tensor_dir(path):
    """Pre-decoded ``train.brnet`` / ``test.brnet`` pair (stand-in for ImageNet)."""
    path = Path(path)
    train = load_dataset(path / "train.brnet", "train")
    test = load_dataset(path / "test.brnet", "test").with_stats_of(train)
    return train, test


# --- synthetic mirror-pair glyphs -------------------------------------------

# asymmetric polygons in [-1, 1]^2, x to the right, y downwards
_GLYPHS = (
    # L
    [(-0.6, -0.8), (-0.2, -0.8), (-0.2, 0.4), (0.6, 0.4), (0.6, 0.8), (-0.6, 0.8)],
    # F
    [(-0.6, -0.8), (0.6, -0.8), (0.6, -0.45), (-0.2, -0.45), (-0.2, -0.1), (0.3, -0.1), (0.3, 0.25),
     (-0.2, 0.25), (-0.2, 0.8), (-0.6, 0.8)],
    # right triangle, right angle bottom-left
    [(-0.7, 0.7), (-0.7, -0.7), (0.7, 0.7)],
    # solid P
    [(-0.6, -0.8), (0.5, -0.8), (0.5, 0.1), (-0.2, 0.1), (-0.2, 0.8), (-0.6, 0.8)],
)

_SUPERSAMPLE = 4


def _inside(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def glyph_coverage(cls: int, size: int, scale: float, angle: float, dx: float, dy: float) -> np.ndarray:
    """Anti-aliased coverage mask (size x size) of glyph class ``cls``.

    Class ``2j + 1`` is the horizontal mirror of class ``2j``.
    """
    if cls % 2:
        # render the twin with mirrored placement, then flip: exact on edge samples
        return glyph_coverage(cls - 1, size, scale, -angle, -dx, dy)[:, ::-1]
    poly = np.asarray(_GLYPHS[cls // 2], dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    poly = poly @ np.array([[c, s], [-s, c]]) * scale + np.array([dx, dy])
    k = size * _SUPERSAMPLE
    centers = (np.arange(k) + 0.5) / k * 2.0 - 1.0
    py, px = np.meshgrid(centers, centers, indexing="ij")
    mask = _inside(poly, px, py).astype(np.float64)
    return mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))


def synth_shapes(
    n: int, size: int = 32, num_classes: int = 8, seed: int = 0, split: str = "train", noise: float = 0.03
) -> Dataset:
    """Deterministic glyph images whose classes come in mirror pairs.

    Each image draws a random glyph placement (scale, small rotation,
    offset) and random foreground/background colours. Horizontal flips turn
    class ``2j`` into class ``2j + 1``, so flip sensitivity is observable.
    """
    if not 2 <= num_classes <= 2 * len(_GLYPHS):
        raise DataError(f"num_classes must be in [2, {2 * len(_GLYPHS)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, cls in enumerate(labels):
        scale = rng.uniform(0.55, 0.85)
        angle = np.radians(rng.uniform(-15.0, 15.0))
        slack = 1.0 - scale
        dx, dy = rng.uniform(-slack, slack, size=2) * 0.8
        cov = glyph_coverage(int(cls), size, scale, angle, dx, dy)[..., None]
        fg = rng.uniform(0.0, 1.0, size=3)
        bg = rng.uniform(0.0, 1.0, size=3)
        # keep contrast visible
        while np.abs(fg - bg).sum() < 0.6:
            bg = rng.uniform(0.0, 1.0, size=3)
        img = cov * fg + (1.0 - cov) * bg
        if noise:
            img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, num_classes, split=split, name="synth_shapes")


def synth_splits(n_train, n_test, size=32, num_classes=8, seed=0, noise=0.03):
    train = synth_shapes(n_train, size, num_classes, seed, "train", noise)
    # a different seed stream keeps the splits disjoint
    test = synth_shapes(n_test, size, num_classes, seed + 1_000_003, "test", noise).with_stats_of(train)
    return train, test


# --- subsets ---------------------------------------------------------------------


def subset(ds: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """Class-balanced sample of ``per_class`` images per class (order kept)."""
    rng = np.random.default_rng(seed)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    if per_class > counts.min():
        raise DataError(f"per_class={per_class} exceeds smallest class count {counts.min()}")
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        keep.append(np.sort(rng.choice(idx, size=per_class, replace=False)) if per_class < len(idx) else idx)
    keep = np.sort(np.concatenate(keep))
    return replace(ds, images=ds.images[keep], labels=ds.labels[keep], mean=None, std=None)


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Sequence[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
