"""Individual image transformations and hardness calibration tables.

Every transform splits into two halves: ``sample_params`` draws whatever is
random (sign, location, composition) and ``apply_params`` is a pure function
of the image and those parameters. ``apply_transform`` chains the two, and a
spec in ``Mode.FIXED`` carries parameters sampled once up front, which is how
the single-location variants (Cutout-i-1, Cropshift-1) stay identical for a
whole training run.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import cropshift as _cs
from .imagecore import (DTYPE, Interpolation, RngStream, affine_about_center, clamp01,
                        fill_vector, resample)


class Kind(str, Enum):
    SHEAR_X = "ShearX"
    SHEAR_Y = "ShearY"
    TRANSLATE_X = "TranslateX"
    TRANSLATE_Y = "TranslateY"
    ROTATE = "Rotate"
    COLOR = "Color"
    SHARPNESS = "Sharpness"
    BRIGHTNESS = "Brightness"
    CONTRAST = "Contrast"
    SOLARIZE = "Solarize"
    EQUALIZE = "Equalize"
    AUTOCONTRAST = "Autocontrast"
    HFLIP = "HorizontalFlip"
    PADCROP = "Padcrop"
    CUTOUT = "Cutout"
    CROPSHIFT = "Cropshift"
    RANDOM_ERASING = "RandomErasing"


class Mode(str, Enum):
    RANDOM = "random"
    FIXED = "fixed"


class CutoutVariant(str, Enum):
    STANDARD = "standard"
    INSIDE_ONLY = "inside"
    INSIDE_FIXED = "inside_fixed"


COLOR_KINDS = (Kind.COLOR, Kind.SHARPNESS, Kind.BRIGHTNESS, Kind.CONTRAST,
               Kind.SOLARIZE, Kind.EQUALIZE, Kind.AUTOCONTRAST)
SHAPE_KINDS = (Kind.SHEAR_X, Kind.SHEAR_Y, Kind.TRANSLATE_X, Kind.TRANSLATE_Y, Kind.ROTATE)

# transforms whose strength is meaningless
STRENGTHLESS = frozenset({Kind.EQUALIZE, Kind.AUTOCONTRAST, Kind.HFLIP})

# inclusive legal strength ranges; None means unbounded above
STRENGTH_RANGE: dict[Kind, tuple[float, float | None]] = {
    Kind.SHEAR_X: (0.0, 1.0),
    Kind.SHEAR_Y: (0.0, 1.0),
    Kind.TRANSLATE_X: (0.0, None),
    Kind.TRANSLATE_Y: (0.0, None),
    Kind.ROTATE: (0.0, 180.0),
    Kind.COLOR: (0.0, 2.0),
    Kind.SHARPNESS: (0.0, 2.0),
    Kind.BRIGHTNESS: (0.5, 2.0),
    Kind.CONTRAST: (0.5, 2.0),
    Kind.SOLARIZE: (0.0, 1.0),
    Kind.PADCROP: (0.0, None),
    Kind.CUTOUT: (0.0, None),
    Kind.CROPSHIFT: (0.0, None),
    Kind.RANDOM_ERASING: (0.0, 1.0),
}

INTEGER_STRENGTH = frozenset({Kind.PADCROP, Kind.CUTOUT, Kind.CROPSHIFT})

ERASE_AREA_FLOOR = 0.02
ERASE_ASPECT = (0.3, 3.3)
ERASE_ATTEMPTS = 10

# Cutout side that worked best on a small and on a larger model
CUTOUT_PRESETS = {"small": 8, "large": 20}


@dataclass(frozen=True)
class TransformSpec:
    """One transform with its strength.

    ``params`` is only read in ``Mode.FIXED``; use ``fix_spec`` to fill it.
    ``fill`` defaults to black. For Cutout, ``variant`` picks where the patch
    may land. For RandomErasing, ``strength`` is the upper bound of the
    erased-area fraction and ``erase_noise`` selects uniform-noise fill.
    """

    kind: Kind
    strength: float = 0.0
    mode: Mode = Mode.RANDOM
    params: Mapping | None = None
    fill: tuple[float, ...] | None = None
    interpolation: Interpolation = Interpolation.NEAREST
    variant: CutoutVariant = CutoutVariant.STANDARD
    erase_noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "interpolation", Interpolation(self.interpolation))
        object.__setattr__(self, "variant", CutoutVariant(self.variant))
        if self.fill is not None:
            object.__setattr__(self, "fill", tuple(float(v) for v in np.ravel(self.fill)))
        validate_strength(self.kind, self.strength)
        if self.mode is Mode.FIXED and self.params is None:
            raise ValueError("fixed-mode spec needs params; build it with fix_spec")
        if self.kind is Kind.CUTOUT and self.variant is CutoutVariant.INSIDE_FIXED \
                and self.mode is not Mode.FIXED:
            raise ValueError("inside_fixed cutout must be built with fix_spec")


def validate_strength(kind: Kind, strength: float) -> None:
    kind = Kind(kind)
    if kind in STRENGTHLESS:
        return
    if not math.isfinite(strength):
        raise ValueError(f"{kind.value} strength must be finite")
    lo, hi = STRENGTH_RANGE[kind]
    if strength < lo or (hi is not None and strength > hi):
        raise ValueError(f"{kind.value} strength {strength} outside [{lo}, {hi}]")
    if kind in INTEGER_STRENGTH and int(strength) != strength:
        raise ValueError(f"{kind.value} strength must be an integer, got {strength}")


# ---------------------------------------------------------------------------
# pixel-level operations

def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def _grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[:, :, 0]
    return (img[:, :, 0] * DTYPE(0.299) + img[:, :, 1] * DTYPE(0.587)
            + img[:, :, 2] * DTYPE(0.114))


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    f = DTYPE(factor)
    return clamp01(degenerate + f * (img - degenerate))


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return clamp01(img * DTYPE(factor))


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = DTYPE(_grayscale(img).mean(dtype=np.float64))
    return _blend(np.full_like(img, mean), img, factor)


def color(img: np.ndarray, factor: float) -> np.ndarray:
    if img.shape[2] == 1:
        return img.copy()
    gray = _grayscale(img)[:, :, None]
    return _blend(np.broadcast_to(gray, img.shape), img, factor)


def sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    """Blend with a 3x3 smoothed copy (centre weight 5, neighbours 1); border pixels kept."""
    h, w, _ = img.shape
    if h < 3 or w < 3:
        return img.copy()
    acc = np.zeros((h - 2, w - 2, img.shape[2]), dtype=DTYPE)
    for dy in range(3):
        for dx in range(3):
            acc += img[dy:dy + h - 2, dx:dx + w - 2]
    acc += DTYPE(4) * img[1:-1, 1:-1]
    smooth = img.copy()
    smooth[1:-1, 1:-1] = acc / DTYPE(13)
    return _blend(smooth, img, factor)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert values strictly above ``threshold``."""
    return np.where(img > DTYPE(threshold), DTYPE(1) - img, img).astype(DTYPE)


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.floor(img * DTYPE(255) + DTYPE(0.5)).astype(np.int64)


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalisation on the 8-bit grid.

    Same lookup-table construction as the usual 8-bit image libraries. A
    channel whose histogram gives a zero step is returned unchanged.
    """
    q = quantize8(img)
    out = img.copy()
    for ch in range(img.shape[2]):
        hist = np.bincount(q[:, :, ch].ravel(), minlength=256)
        last = hist[np.nonzero(hist)[0][-1]]
        step = (hist.sum() - last) // 255
        if step == 0:
            continue
        lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
        lut = np.minimum(lut, 255)
        out[:, :, ch] = lut[q[:, :, ch]].astype(DTYPE) / DTYPE(255)
    return out


def autocontrast(img: np.ndarray) -> np.ndarray:
    """Stretch each channel so its min maps to 0 and its max to 1."""
    out = img.copy()
    for ch in range(img.shape[2]):
        plane = img[:, :, ch]
        lo, hi = plane.min(), plane.max()
        if hi > lo:
            out[:, :, ch] = (plane - lo) / (hi - lo)
    return clamp01(out)


# ---------------------------------------------------------------------------
# regional transforms

def _cutout_location(h: int, w: int, size: int, variant: CutoutVariant,
                     rng: RngStream) -> tuple[int, int]:
    if variant is CutoutVariant.STANDARD:
        cx, cy = rng.uniform_int(0, w - 1), rng.uniform_int(0, h - 1)
        return cx - size // 2, cy - size // 2
    return rng.uniform_int(0, w - size), rng.uniform_int(0, h - size)


def paint_box(img: np.ndarray, x: int, y: int, bw: int, bh: int, fill) -> np.ndarray:
    """Fill the box with top-left (x, y), clipped to the image."""
    h, w, c = img.shape
    out = img.copy()
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + bw, w), min(y + bh, h)
    if x1 > x0 and y1 > y0:
        out[y0:y1, x0:x1] = fill_vector(fill, c)
    return out


def cutout(img: np.ndarray, size: int, variant: CutoutVariant | str = CutoutVariant.STANDARD,
           rng: RngStream | None = None, fill=None,
           location: tuple[int, int] | None = None) -> np.ndarray:
    """Fill a ``size`` x ``size`` square.

    STANDARD centres the square anywhere in the image, so it may hang over the
    border. INSIDE_ONLY keeps it fully inside. INSIDE_FIXED needs the cached
    top-left ``location`` (draw it once with ``sample_params``).
    """
    img = np.asarray(img, dtype=DTYPE)
    h, w, _ = img.shape
    variant = CutoutVariant(variant)
    size = int(size)
    if size < 0 or size > min(h, w):
        raise ValueError(f"cutout size {size} outside [0, {min(h, w)}]")
    if size == 0:
        return img.copy()
    if location is None:
        if variant is CutoutVariant.INSIDE_FIXED:
            raise ValueError("inside_fixed cutout requires a cached location")
        location = _cutout_location(h, w, size, variant, rng)
    x, y = location
    if variant is not CutoutVariant.STANDARD and not (0 <= x <= w - size and 0 <= y <= h - size):
        raise ValueError(f"location {location} puts the cutout outside the image")
    return paint_box(img, x, y, size, size, fill)


def padcrop(img: np.ndarray, pad: int, rng: RngStream | None = None, fill=None,
            offset: tuple[int, int] | None = None) -> np.ndarray:
    """Pad every edge by ``pad`` then crop back; ``offset`` is the crop's (x, y) in the padded image."""
    img = np.asarray(img, dtype=DTYPE)
    h, w, c = img.shape
    pad = int(pad)
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return img.copy()
    if offset is None:
        offset = (rng.uniform_int(0, 2 * pad), rng.uniform_int(0, 2 * pad))
    ox, oy = offset
    if not (0 <= ox <= 2 * pad and 0 <= oy <= 2 * pad):
        raise ValueError(f"offset {offset} outside [0, {2 * pad}]")
    canvas = np.empty((h + 2 * pad, w + 2 * pad, c), dtype=DTYPE)
    canvas[:] = fill_vector(fill, c)
    canvas[pad:pad + h, pad:pad + w] = img
    return canvas[oy:oy + h, ox:ox + w].copy()


def _check_erase_ranges(area_range, aspect_range) -> None:
    lo, hi = area_range
    if not (0 < lo <= hi <= 1):
        raise ValueError(f"area range must satisfy 0 < lo <= hi <= 1, got {area_range}")
    alo, ahi = aspect_range
    if not (0 < alo <= ahi):
        raise ValueError(f"aspect range must satisfy 0 < lo <= hi, got {aspect_range}")


def sample_erase_box(h: int, w: int, area_range, aspect_range, rng: RngStream) -> dict | None:
    """Draw an erasing rectangle, or None after ``ERASE_ATTEMPTS`` failed tries.

    A candidate is kept only if it fits and its realised (rounded) area
    fraction and aspect ratio still fall inside the requested ranges.
    """
    _check_erase_ranges(area_range, aspect_range)
    total = h * w
    for _ in range(ERASE_ATTEMPTS):
        area = rng.uniform(*area_range) * total if area_range[0] < area_range[1] \
            else area_range[0] * total
        ratio = rng.uniform(*aspect_range) if aspect_range[0] < aspect_range[1] \
            else aspect_range[0]
        eh = int(round(math.sqrt(area * ratio)))
        ew = int(round(math.sqrt(area / ratio)))
        if not (1 <= eh <= h and 1 <= ew <= w):
            continue
        frac = eh * ew / total
        if not (area_range[0] <= frac <= area_range[1]):
            continue
        if not (aspect_range[0] <= eh / ew <= aspect_range[1]):
            continue
        return {"x": rng.uniform_int(0, w - ew), "y": rng.uniform_int(0, h - eh),
                "width": ew, "height": eh, "noise_seed": rng.spawn_seed()}
    return None


def erase_box(img: np.ndarray, box: dict | None, noise: bool = True, fill=None) -> np.ndarray:
    """Fill ``box`` with uniform noise (seeded by the box) or a constant."""
    img = np.asarray(img, dtype=DTYPE)
    if box is None:
        return img.copy()
    x, y, ew, eh = box["x"], box["y"], box["width"], box["height"]
    out = img.copy()
    if noise:
        gen = RngStream(box["noise_seed"], 0).generator
        out[y:y + eh, x:x + ew] = gen.random((eh, ew, img.shape[2]), dtype=DTYPE)
    else:
        out[y:y + eh, x:x + ew] = fill_vector(fill, img.shape[2])
    return out


def random_erase(img: np.ndarray, area_range=(0.02, 0.33), aspect_range=ERASE_ASPECT,
                 rng: RngStream | None = None, noise: bool = True, fill=None) -> np.ndarray:
    """Erase one random rectangle inside the image; unchanged if none is found."""
    img = np.asarray(img, dtype=DTYPE)
    h, w, _ = img.shape
    return erase_box(img, sample_erase_box(h, w, area_range, aspect_range, rng), noise, fill)


# ---------------------------------------------------------------------------
# generic dispatch

def _signed_strength(params: Mapping, strength: float) -> float:
    return strength * params.get("sign", 1)


def sample_params(spec: TransformSpec, shape: tuple[int, ...], rng: RngStream) -> dict:
    """Draw the random parameters ``spec`` needs for an image of ``shape``."""
    h, w = shape[0], shape[1]
    kind = spec.kind
    if kind in SHAPE_KINDS:
        return {"sign": 1 if rng.random() < 0.5 else -1}
    if kind is Kind.PADCROP:
        p = int(spec.strength)
        return {"offset": [rng.uniform_int(0, 2 * p), rng.uniform_int(0, 2 * p)]}
    if kind is Kind.CUTOUT:
        size = int(spec.strength)
        if size == 0:
            return {}
        variant = CutoutVariant.INSIDE_ONLY if spec.variant is CutoutVariant.INSIDE_FIXED \
            else spec.variant
        return {"location": list(_cutout_location(h, w, size, variant, rng))}
    if kind is Kind.CROPSHIFT:
        return _cs.sample_params(int(spec.strength), h, w, rng).to_dict()
    if kind is Kind.RANDOM_ERASING:
        if spec.strength == 0:
            return {"box": None}
        area = (min(ERASE_AREA_FLOOR, spec.strength), spec.strength)
        return {"box": sample_erase_box(h, w, area, ERASE_ASPECT, rng)}
    return {}


def apply_params(spec: TransformSpec, params: Mapping, img: np.ndarray) -> np.ndarray:
    """Apply ``spec`` with already-sampled ``params``. Deterministic."""
    img = np.asarray(img, dtype=DTYPE)
    h, w, c = img.shape
    kind, s = spec.kind, spec.strength
    fill = spec.fill

    if kind is Kind.HFLIP:
        return hflip(img)
    if kind in (Kind.SHEAR_X, Kind.SHEAR_Y, Kind.ROTATE, Kind.TRANSLATE_X, Kind.TRANSLATE_Y):
        v = _signed_strength(params, s)
        if v == 0:
            return img.copy()
        if kind is Kind.SHEAR_X:
            inv = affine_about_center(h, w, [[1, v], [0, 1]])
        elif kind is Kind.SHEAR_Y:
            inv = affine_about_center(h, w, [[1, 0], [v, 1]])
        elif kind is Kind.ROTATE:
            a = math.radians(v)
            inv = affine_about_center(h, w, [[math.cos(a), -math.sin(a)],
                                             [math.sin(a), math.cos(a)]])
        elif kind is Kind.TRANSLATE_X:
            inv = [[1, 0, -v], [0, 1, 0]]
        else:
            inv = [[1, 0, 0], [0, 1, -v]]
        return resample(img, inv, spec.interpolation, fill)
    if kind is Kind.COLOR:
        return color(img, s)
    if kind is Kind.SHARPNESS:
        return sharpness(img, s)
    if kind is Kind.BRIGHTNESS:
        return brightness(img, s)
    if kind is Kind.CONTRAST:
        return contrast(img, s)
    if kind is Kind.SOLARIZE:
        return solarize(img, s)
    if kind is Kind.EQUALIZE:
        return equalize(img)
    if kind is Kind.AUTOCONTRAST:
        return autocontrast(img)
    if kind is Kind.PADCROP:
        if s == 0:
            return img.copy()
        return padcrop(img, int(s), fill=fill, offset=tuple(params["offset"]))
    if kind is Kind.CUTOUT:
        if s == 0:
            return img.copy()
        return cutout(img, int(s), spec.variant, fill=fill, location=tuple(params["location"]))
    if kind is Kind.CROPSHIFT:
        return _cs.cropshift_fixed(img, _cs.CropshiftParams(**params), fill)
    if kind is Kind.RANDOM_ERASING:
        return erase_box(img, params.get("box"), spec.erase_noise, fill)
    raise ValueError(f"unknown transform kind {kind!r}")


def apply_transform(spec: TransformSpec, img: np.ndarray, rng: RngStream | None) -> np.ndarray:
    """Apply one transform. Fixed-mode specs never touch ``rng``."""
    img = np.asarray(img, dtype=DTYPE)
    if spec.mode is Mode.FIXED:
        params = spec.params
    else:
        params = sample_params(spec, img.shape, rng)
    return apply_params(spec, params, img)


def fix_spec(spec: TransformSpec, shape: tuple[int, ...], rng: RngStream) -> TransformSpec:
    """Sample parameters once and freeze them into a fixed-mode spec."""
    params = sample_params(replace(spec, mode=Mode.RANDOM, params=None)
                           if spec.mode is Mode.FIXED else spec, shape, rng)
    return replace(spec, mode=Mode.FIXED, params=params)


def make_spec(kind, strength: float = 0.0, **kwargs) -> TransformSpec:
    """Build a spec, expanding the named variants Cutout-i, Cutout-i-1 and Cropshift-1.

    The ``-1`` variants come back in RANDOM mode and still need ``fix_spec``.
    """
    name = kind.value if isinstance(kind, Kind) else str(kind)
    if name in ("Cutout-i", "Cutout-i-1"):
        kwargs.setdefault("variant", CutoutVariant.INSIDE_ONLY)
        return TransformSpec(Kind.CUTOUT, strength, **kwargs)
    if name == "Cropshift-1":
        return TransformSpec(Kind.CROPSHIFT, strength, **kwargs)
    return TransformSpec(Kind(name), strength, **kwargs)


# ---------------------------------------------------------------------------
# hardness calibration

HARDNESS_DEGREES = (1.04, 1.17, 1.34, 1.56, 1.87, 2.34, 3.12)
ROBUSTNESS_TARGETS = (0.45, 0.40, 0.35, 0.30, 0.25, 0.20, 0.15)
REFERENCE_BASE_ROBUSTNESS = 0.4693


@dataclass(frozen=True)
class HardnessCalibration:
    """Strength for each hardness degree of one transform kind.

    ``levels[i]`` is ``(hardness, strength)`` for degree ``i + 1``; a strength
    of None marks a level the calibration search could not reach.
    """

    kind: str
    levels: tuple[tuple[float, float | None], ...]
    achieved: tuple[float | None, ...] | None = None

    def __post_init__(self):
        levels = tuple((float(hd), None if st is None else float(st)) for hd, st in self.levels)
        hard = [hd for hd, _ in levels]
        if any(b <= a for a, b in zip(hard, hard[1:])):
            raise ValueError(f"hardness degrees must be strictly increasing: {hard}")
        object.__setattr__(self, "levels", levels)

    def strength(self, degree: int) -> float:
        if not 1 <= degree <= len(self.levels):
            raise KeyError(f"{self.kind} has no hardness degree {degree}")
        value = self.levels[degree - 1][1]
        if value is None:
            raise KeyError(f"{self.kind} degree {degree} was not reachable during calibration")
        return value

    def hardness(self, degree: int) -> float:
        if not 1 <= degree <= len(self.levels):
            raise KeyError(f"{self.kind} has no hardness degree {degree}")
        return self.levels[degree - 1][0]


@dataclass
class CalibrationTable:
    """Calibrations for many kinds, stored as one INI file.

    Layout::

        [ShearX]
        1 = 0.1
        1.hardness = 1.04
        1.achieved = 0.452     ; optional robustness reached by calibration
        2 = unreachable
    """

    entries: dict[str, HardnessCalibration] = field(default_factory=dict)

    def __getitem__(self, kind) -> HardnessCalibration:
        name = kind.value if isinstance(kind, Kind) else str(kind)
        if name not in self.entries and name.endswith("-1"):
            # single-location variants share the calibration of their random form
            name = name[:-2]
        return self.entries[name]

    def __contains__(self, kind) -> bool:
        name = kind.value if isinstance(kind, Kind) else str(kind)
        return name in self.entries

    def kinds(self) -> list[str]:
        return list(self.entries)

    def dumps(self) -> str:
        lines = []
        for name, cal in self.entries.items():
            lines.append(f"[{name}]")
            for deg, (hd, st) in enumerate(cal.levels, start=1):
                lines.append(f"{deg} = {'unreachable' if st is None else repr(st)}")
                lines.append(f"{deg}.hardness = {hd!r}")
                if cal.achieved is not None and cal.achieved[deg - 1] is not None:
                    lines.append(f"{deg}.achieved = {cal.achieved[deg - 1]!r}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "CalibrationTable":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        parser.read_string(text)
        entries = {}
        for name in parser.sections():
            sec = parser[name]
            degrees = sorted(int(k) for k in sec if k.isdigit())
            if degrees != list(range(1, len(degrees) + 1)):
                raise ValueError(f"[{name}] degrees must run 1..n, got {degrees}")
            levels, achieved = [], []
            for deg in degrees:
                raw = sec[str(deg)].strip()
                strength = None if raw == "unreachable" else float(raw)
                default_h = HARDNESS_DEGREES[deg - 1] if deg <= len(HARDNESS_DEGREES) else None
                hd = float(sec.get(f"{deg}.hardness", default_h))
                levels.append((hd, strength))
                got = sec.get(f"{deg}.achieved")
                achieved.append(None if got is None else float(got))
            entries[name] = HardnessCalibration(
                name, tuple(levels), tuple(achieved) if any(a is not None for a in achieved) else None)
        return cls(entries)

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        return cls.loads(Path(path).read_text())


def default_calibration() -> CalibrationTable:
    """The calibration table bundled with the package (mostly placeholders)."""
    return CalibrationTable.loads(
        (Path(__file__).with_name("data") / "calibration.ini").read_text())


def calibrated_spec(kind, degree: int, calibration, **kwargs) -> TransformSpec:
    """Spec for ``kind`` at hardness ``degree`` (1-based) from a calibration.

    ``calibration`` may be a ``HardnessCalibration`` for this kind or a whole
    ``CalibrationTable``. Unknown degrees raise KeyError.
    """
    if isinstance(calibration, CalibrationTable):
        calibration = calibration[kind]
    return make_spec(kind, calibration.strength(int(degree)), **kwargs)
