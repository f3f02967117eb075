"""Cropshift: crop N border lines in total, then shift the crop inside a fill canvas."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .imagecore import DTYPE, RngStream, fill_vector


@dataclass(frozen=True)
class CropshiftParams:
    """Lines removed from each border and the crop's top-left corner in the output.

    ``shift_x`` ranges over [0, l + r] and ``shift_y`` over [0, t + b]; a shift
    of (l, t) puts the crop back where it came from.
    """

    left: int
    right: int
    top: int
    bottom: int
    shift_x: int
    shift_y: int

    @property
    def strength(self) -> int:
        return self.left + self.right + self.top + self.bottom

    def validate(self, height: int, width: int) -> None:
        parts = (self.left, self.right, self.top, self.bottom, self.shift_x, self.shift_y)
        if any(int(p) != p or p < 0 for p in parts):
            raise ValueError(f"cropshift parameters must be non-negative integers: {self}")
        if self.left + self.right >= width or self.top + self.bottom >= height:
            raise ValueError(f"cropshift removes the whole image: {self}")
        if self.shift_x > self.left + self.right or self.shift_y > self.top + self.bottom:
            raise ValueError(f"cropshift destination falls outside the canvas: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_composition(n: int, rng: RngStream) -> tuple[int, int, int, int]:
    """Draw (l, r, t, b) >= 0 with l + r + t + b = n, uniform over all weak compositions.

    Stars and bars: choose 3 bar positions among n + 3 slots without
    replacement; the gaps between bars are the four parts.
    """
    n = int(n)
    if n < 0:
        raise ValueError(f"strength must be non-negative, got {n}")
    if n == 0:
        return (0, 0, 0, 0)
    bars = np.sort(rng.generator.choice(n + 3, size=3, replace=False))
    a, b, c = (int(v) for v in bars)
    return (a, b - a - 1, c - b - 1, n + 2 - c)


def sample_params(n: int, height: int, width: int, rng: RngStream) -> CropshiftParams:
    """Sample a composition and a uniformly placed destination for strength ``n``."""
    _check_strength(n, height, width)
    l, r, t, b = sample_composition(n, rng)
    sx = rng.uniform_int(0, l + r)
    sy = rng.uniform_int(0, t + b)
    return CropshiftParams(l, r, t, b, sx, sy)


def cropshift_fixed(img: np.ndarray, params: CropshiftParams, fill=None) -> np.ndarray:
    """Apply a fully specified cropshift. Pure and deterministic."""
    img = np.asarray(img, dtype=DTYPE)
    h, w, c = img.shape
    params.validate(h, w)
    fillv = fill_vector(fill, c)
    if params.strength == 0:
        return img.copy()
    ch = h - params.top - params.bottom
    cw = w - params.left - params.right
    out = np.empty_like(img)
    out[:] = fillv
    out[params.shift_y:params.shift_y + ch, params.shift_x:params.shift_x + cw] = \
        img[params.top:params.top + ch, params.left:params.left + cw]
    return out


def cropshift(img: np.ndarray, n: int, rng: RngStream, fill=None) -> np.ndarray:
    img = np.asarray(img, dtype=DTYPE)
    h, w, _ = img.shape
    return cropshift_fixed(img, sample_params(n, h, w, rng), fill)


def _check_strength(n: int, height: int, width: int) -> None:
    if int(n) != n or n < 0:
        raise ValueError(f"strength must be a non-negative integer, got {n}")
    if n >= min(height, width):
        raise ValueError(f"strength {n} must be below min(height, width) = {min(height, width)}")
