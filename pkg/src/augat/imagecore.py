"""Images, datasets, random streams and resampling.

Images are plain numpy arrays of shape (H, W, C), dtype float32, values in
[0, 1]. Batches stack images along a leading axis. Nothing here wraps the
array in a class; ``as_image`` validates and normalises.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

DTYPE = np.float32
_MASK64 = (1 << 64) - 1


def as_image(data, *, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as an image and return it as float32 (H, W, C).

    2-D input is treated as a single-channel image. uint8 input is divided by
    255. Raises ValueError on bad shape or out-of-range values.
    """
    arr = np.asarray(data)
    if arr.dtype == np.uint8:
        arr = arr.astype(DTYPE) / DTYPE(255)
    elif arr.dtype != DTYPE or copy:
        arr = arr.astype(DTYPE, copy=True)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWx1 or HxWx3, got shape {arr.shape}")
    if arr.size and not (np.all(arr >= 0) and np.all(arr <= 1)):
        raise ValueError("image values must lie in [0, 1]")
    return arr


def clamp01(img: np.ndarray) -> np.ndarray:
    """Clip every value into [0, 1]; NaN becomes 0."""
    out = np.clip(np.asarray(img, dtype=DTYPE), 0, 1)
    return np.nan_to_num(out, nan=0.0)


def fill_vector(fill, channels: int) -> np.ndarray:
    """Broadcast a scalar or per-channel fill to a length-``channels`` vector."""
    if fill is None:
        fill = 0.0
    vec = np.asarray(fill, dtype=DTYPE).reshape(-1)
    if vec.size == 1:
        vec = np.repeat(vec, channels)
    if vec.size != channels:
        raise ValueError(f"fill has {vec.size} values for {channels} channels")
    if np.any(vec < 0) or np.any(vec > 1):
        raise ValueError("fill values must lie in [0, 1]")
    return vec


@dataclass(frozen=True)
class Dataset:
    """Images (N, H, W, C) float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=DTYPE)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so streams with different ids are independent and any
    stream can be recreated from its key alone. Not thread-safe: one stream
    per image or per worker.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @property
    def generator(self) -> np.random.Generator:
        """Underlying numpy generator, for vectorised draws."""
        return self._gen

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return float(self._gen.random())

    def uniform(self, lo: float, hi: float) -> float:
        return float(self._gen.uniform(lo, hi))

    def uniform_int(self, lo: int, hi: int) -> int:
        return sample_uniform_int(self, lo, hi)

    def choice(self, n: int, p=None) -> int:
        """Index in [0, n) drawn with probabilities ``p`` (uniform if None)."""
        if p is None:
            return self.uniform_int(0, n - 1)
        return int(self._gen.choice(n, p=p))

    def spawn_seed(self) -> int:
        """Draw a fresh 63-bit seed for a child stream."""
        return int(self._gen.integers(0, 1 << 63))


def sample_uniform_int(rng: RngStream, lo: int, hi: int) -> int:
    """Uniform integer in the closed range [lo, hi]."""
    lo, hi = int(lo), int(hi)
    if lo > hi:
        raise ValueError(f"empty range [{lo}, {hi}]")
    if lo == hi:
        return lo
    return int(rng.generator.integers(lo, hi, endpoint=True))


class Interpolation(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


def resample(img: np.ndarray, inverse_map, method: Interpolation | str = Interpolation.NEAREST,
             fill=None) -> np.ndarray:
    """Warp ``img`` with an affine map from output to source pixel coordinates.

    ``inverse_map`` is a 2x3 matrix taking output (x, y, 1) to source (x, y),
    with pixel centres at integer coordinates. Samples falling outside the
    source are replaced by ``fill``.
    """
    img = np.asarray(img, dtype=DTYPE)
    h, w, c = img.shape
    m = np.asarray(inverse_map, dtype=np.float64)
    if m.shape != (2, 3):
        raise ValueError(f"inverse_map must be 2x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("inverse_map has non-finite entries")
    fillv = fill_vector(fill, c)
    method = Interpolation(method)

    if np.array_equal(m, [[1, 0, 0], [0, 1, 0]]):
        return img.copy()

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]

    if method is Interpolation.NEAREST:
        # round half away from zero keeps integer-exact maps exact
        ix = np.floor(sx + 0.5).astype(np.int64)
        iy = np.floor(sy + 0.5).astype(np.int64)
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.empty_like(img)
        out[:] = fillv
        out[valid] = img[iy[valid], ix[valid]]
        return out

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    padded = np.empty((h + 2, w + 2, c), dtype=np.float64)
    padded[:] = fillv
    padded[1:-1, 1:-1] = img

    def tap(yy, xx):
        inside = (xx >= -1) & (xx <= w) & (yy >= -1) & (yy <= h)
        vals = np.empty((h, w, c), dtype=np.float64)
        vals[:] = fillv
        vals[inside] = padded[yy[inside] + 1, xx[inside] + 1]
        return vals

    out = ((1 - fx) * (1 - fy) * tap(y0, x0) + fx * (1 - fy) * tap(y0, x0 + 1)
           + (1 - fx) * fy * tap(y0 + 1, x0) + fx * fy * tap(y0 + 1, x0 + 1))
    # a sample whose centre is outside the source is fill, not a blend
    outside = (sx < -0.5) | (sx > w - 0.5) | (sy < -0.5) | (sy > h - 0.5)
    out[outside] = fillv
    return clamp01(out.astype(DTYPE))


def affine_about_center(h: int, w: int, forward: np.ndarray) -> np.ndarray:
    """Inverse map (2x3) for a forward 2x2 linear map applied about the image centre."""
    inv = np.linalg.inv(np.asarray(forward, dtype=np.float64))
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    centre = np.array([cx, cy])
    offset = centre - inv @ centre
    return np.hstack([inv, offset[:, None]])
