"""Dataset ingestion: CIFAR-10 binary batches, PNG directories and a synthetic blob generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .imagecore import DTYPE, Dataset, RngStream

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS
CIFAR_RECORD = 1 + CIFAR_PIXELS
CIFAR_CLASSES = 10


class DataError(ValueError):
    """Input data could not be parsed."""


def parse_cifar_binary(blob: bytes, class_count: int = CIFAR_CLASSES) -> Dataset:
    """Parse records of one label byte followed by 3072 channel-planar pixel bytes."""
    n, rem = divmod(len(blob), CIFAR_RECORD)
    if rem:
        offset = n * CIFAR_RECORD
        raise DataError(f"truncated record at byte offset {offset}: "
                        f"{rem} of {CIFAR_RECORD} bytes present")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= class_count)
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    planes = raw[:, 1:].reshape(n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(DTYPE) / DTYPE(255)
    return Dataset(images, labels, class_count)


def load_cifar_binary(path, class_count: int = CIFAR_CLASSES) -> Dataset:
    return parse_cifar_binary(Path(path).read_bytes(), class_count)


def dump_cifar_binary(data: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar_binary`; pixels are rounded to the nearest byte."""
    if data.image_shape != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS):
        raise ValueError(f"CIFAR records hold 32x32x3 images, got {data.image_shape}")
    if len(data) and data.labels.max() > 255:
        raise ValueError("labels must fit in one byte")
    pixels = np.rint(data.images * 255).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(data), CIFAR_PIXELS)
    records = np.concatenate([data.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def save_cifar_binary(data: Dataset, path) -> None:
    Path(path).write_bytes(dump_cifar_binary(data))


# ---------------------------------------------------------------------------
# PNG directories

def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(DTYPE) / DTYPE(255)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_png(img: np.ndarray, path) -> None:
    from PIL import Image

    arr = to_uint8(img)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path, format="PNG")


def load_png_directory(root) -> tuple[Dataset, list[str]]:
    """Load ``root/<class>/*.png``; classes are sorted subdirectory names.

    Returns the dataset and the class names. All images must share one shape.
    """
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name).glob("*.png")):
            try:
                images.append(read_png(f))
            except OSError as exc:
                raise DataError(f"cannot read {f}: {exc}") from exc
            labels.append(label)
    if not images:
        raise DataError(f"no PNG files under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"images under {root} have mixed shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.asarray(labels), len(classes)), classes


# ---------------------------------------------------------------------------
# synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    """Two-class images: a soft blob whose colour encodes the class, on a noisy grey field.

    The class-0 blob leans red and the class-1 blob leans green by a per-image
    margin drawn uniformly from [``margin_low``, ``margin``] (``margin_low``
    defaults to ``margin``). The blob centre is placed uniformly at random, so
    flips and shifts keep the label. ``noise`` is the per-pixel Gaussian std,
    and ``label_noise`` is the fraction of labels flipped after generation.
    """

    count: int = 200
    size: int = 16
    margin: float = 0.15
    noise: float = 0.1
    blob_sigma: float = 3.0
    label_noise: float = 0.0
    seed: int = 0
    margin_low: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    low = spec.margin if spec.margin_low is None else spec.margin_low
    if spec.count < 0 or spec.size < 1 or not 0 <= spec.label_noise <= 1 or low > spec.margin:
        raise ValueError(f"invalid synthetic spec {spec}")
    g = RngStream(spec.seed, 0x5EED).generator
    n, s = spec.count, spec.size
    labels = np.arange(n) % 2
    g.shuffle(labels)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = g.uniform(0, s - 1, n)
    cx = g.uniform(0, s - 1, n)
    blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
                  / (2 * spec.blob_sigma ** 2))
    signed = np.where(labels == 0, 1.0, -1.0) * g.uniform(low, spec.margin, n)
    base = g.uniform(0.3, 0.7, (n, 1, 1, 1))
    tint = np.zeros((n, 1, 1, 3))
    tint[:, 0, 0, 0] = signed
    tint[:, 0, 0, 1] = -signed
    images = base + blob[..., None] * (0.25 + tint) + g.normal(0, spec.noise, (n, s, s, 3))
    if spec.label_noise:
        flip = g.random(n) < spec.label_noise
        labels = np.where(flip, 1 - labels, labels)
    return Dataset(np.clip(images, 0, 1).astype(DTYPE), labels.astype(np.int64), 2)


def split(data: Dataset, first: int) -> tuple[Dataset, Dataset]:
    idx = np.arange(len(data))
    return data.subset(idx[:first]), data.subset(idx[first:])
