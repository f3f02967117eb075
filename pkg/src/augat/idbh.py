"""The four-layer flip / crop / colour-shape / dropout augmentation and its schedule search."""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import cropshift as _cs
from .imagecore import DTYPE, RngStream
from .transforms import (COLOR_KINDS, ERASE_ASPECT, SHAPE_KINDS, STRENGTHLESS, CalibrationTable,
                         Kind, TransformSpec, apply_params, apply_transform, calibrated_spec,
                         erase_box, fix_spec, hflip, make_spec, sample_erase_box, sample_params,
                         validate_strength)

log = logging.getLogger(__name__)

COLOR_BIASED = "ColorBiased"
SHAPE_BIASED = "ShapeBiased"


@dataclass(frozen=True)
class LayerEntry:
    kind: Kind
    weight: float
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.weight < 0 or not math.isfinite(self.weight):
            raise ValueError(f"{self.kind.value}: weight must be non-negative")
        if self.kind not in STRENGTHLESS:
            if self.low > self.high:
                raise ValueError(f"{self.kind.value}: empty strength range ({self.low}, {self.high})")
            validate_strength(self.kind, self.low)
            validate_strength(self.kind, self.high)


@dataclass(frozen=True)
class ColorShapeLayer:
    """Weighted pool of colour and shape transforms, each with a strength range."""

    entries: tuple[LayerEntry, ...]
    bias: str = "Custom"

    def __post_init__(self):
        entries = tuple(e if isinstance(e, LayerEntry) else LayerEntry(**e) for e in self.entries)
        if not entries or sum(e.weight for e in entries) <= 0:
            raise ValueError("colour/shape layer needs at least one entry with positive weight")
        object.__setattr__(self, "entries", entries)

    @property
    def probabilities(self) -> np.ndarray:
        w = np.array([e.weight for e in self.entries], dtype=np.float64)
        return w / w.sum()

    def sample(self, rng: RngStream) -> tuple[Kind, float]:
        """Pick a transform by weight, then a strength uniformly from its range."""
        entry = self.entries[rng.choice(len(self.entries), p=self.probabilities)]
        if entry.kind in STRENGTHLESS:
            return entry.kind, 0.0
        strength = entry.low if entry.low == entry.high else rng.uniform(entry.low, entry.high)
        return entry.kind, strength


def _biased_layer(bias: str) -> ColorShapeLayer:
    # Placeholder weights and ranges: favoured group gets twice the weight,
    # shape ranges small in ColorBiased and moderate in ShapeBiased.
    colour_w, shape_w = (2.0, 1.0) if bias == COLOR_BIASED else (1.0, 2.0)
    shear_hi, rotate_hi = (0.15, 10.0) if bias == COLOR_BIASED else (0.3, 30.0)
    return ColorShapeLayer((
        LayerEntry(Kind.COLOR, colour_w, 0.1, 1.9),
        LayerEntry(Kind.SHARPNESS, colour_w, 0.1, 1.9),
        LayerEntry(Kind.BRIGHTNESS, colour_w, 0.5, 1.9),
        LayerEntry(Kind.CONTRAST, colour_w, 0.5, 1.9),
        LayerEntry(Kind.AUTOCONTRAST, colour_w),
        LayerEntry(Kind.EQUALIZE, colour_w),
        LayerEntry(Kind.SHEAR_X, shape_w, 0.0, shear_hi),
        LayerEntry(Kind.SHEAR_Y, shape_w, 0.0, shear_hi),
        LayerEntry(Kind.ROTATE, shape_w, 0.0, rotate_hi),
    ), bias)


def color_biased() -> ColorShapeLayer:
    return _biased_layer(COLOR_BIASED)


def shape_biased() -> ColorShapeLayer:
    return _biased_layer(SHAPE_BIASED)


@dataclass(frozen=True)
class IdbhSchedule:
    """Probabilities and strength ranges of the four layers."""

    p_flip: float = 0.5
    p_crop: float = 0.0
    crop_range: tuple[int, int] = (0, 0)
    p_color_shape: float = 0.0
    color_shape: ColorShapeLayer = field(default_factory=color_biased)
    p_dropout: float = 0.0
    dropout_area: tuple[float, float] = (0.02, 0.33)
    dropout_aspect: tuple[float, float] = ERASE_ASPECT
    fill: tuple[float, ...] | None = None
    erase_noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop_range", tuple(int(v) for v in self.crop_range))
        object.__setattr__(self, "dropout_area", tuple(float(v) for v in self.dropout_area))
        object.__setattr__(self, "dropout_aspect", tuple(float(v) for v in self.dropout_aspect))
        if isinstance(self.color_shape, dict):
            object.__setattr__(self, "color_shape", ColorShapeLayer(**self.color_shape))
        if self.fill is not None:
            object.__setattr__(self, "fill", tuple(float(v) for v in self.fill))
        for name in ("p_flip", "p_crop", "p_color_shape", "p_dropout"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} = {p} is not a probability")
        lo, hi = self.crop_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad crop range {self.crop_range}")
        alo, ahi = self.dropout_area
        if not 0 < alo <= ahi <= 1:
            raise ValueError(f"bad dropout area range {self.dropout_area}")

    def validate_for(self, height: int, width: int) -> None:
        if self.crop_range[1] > min(height, width) - 1:
            raise ValueError(f"crop range {self.crop_range} too large for {height}x{width}")

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "flip": {"probability": self.p_flip},
            "crop": {"probability": self.p_crop, "range": list(self.crop_range)},
            "colorshape": {
                "probability": self.p_color_shape,
                "bias": self.color_shape.bias,
                "entries": [{"kind": e.kind.value, "weight": e.weight, "range": [e.low, e.high]}
                            for e in self.color_shape.entries],
            },
            "dropout": {"probability": self.p_dropout, "range": list(self.dropout_area),
                        "aspect": list(self.dropout_aspect), "noise": self.erase_noise},
            "fill": None if self.fill is None else list(self.fill),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IdbhSchedule":
        known = {"flip", "crop", "colorshape", "dropout", "fill"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        cs = doc.get("colorshape", {})
        if "entries" in cs:
            layer = ColorShapeLayer(tuple(
                LayerEntry(e["kind"], e["weight"], *(e.get("range") or (0.0, 0.0)))
                for e in cs["entries"]), cs.get("bias", "Custom"))
        elif cs.get("bias") == SHAPE_BIASED:
            layer = shape_biased()
        else:
            layer = color_biased()
        drop = doc.get("dropout", {})
        return cls(
            p_flip=doc.get("flip", {}).get("probability", 0.5),
            p_crop=doc.get("crop", {}).get("probability", 0.0),
            crop_range=tuple(doc.get("crop", {}).get("range", (0, 0))),
            p_color_shape=cs.get("probability", 0.0),
            color_shape=layer,
            p_dropout=drop.get("probability", 0.0),
            dropout_area=tuple(drop.get("range", (0.02, 0.33))),
            dropout_aspect=tuple(drop.get("aspect", ERASE_ASPECT)),
            erase_noise=drop.get("noise", True),
            fill=doc.get("fill"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "IdbhSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


def identity_schedule() -> IdbhSchedule:
    return IdbhSchedule(p_flip=0.0)


# ---------------------------------------------------------------------------
# applying a schedule

def sample_idbh(sched: IdbhSchedule, shape: Sequence[int], rng: RngStream) -> list[dict]:
    """Draw every layer decision for one image of ``shape``.

    The draw order follows the layer order, one coin per layer, so the
    returned decisions are a complete, JSON-serialisable trace.
    """
    h, w = shape[0], shape[1]
    sched.validate_for(h, w)
    trace = []

    trace.append({"layer": "flip", "applied": rng.random() < sched.p_flip})

    step = {"layer": "crop", "applied": rng.random() < sched.p_crop}
    if step["applied"]:
        n = rng.uniform_int(*sched.crop_range)
        step["params"] = _cs.sample_params(n, h, w, rng).to_dict()
    trace.append(step)

    step = {"layer": "colorshape", "applied": rng.random() < sched.p_color_shape}
    if step["applied"]:
        kind, strength = sched.color_shape.sample(rng)
        spec = TransformSpec(kind, strength)
        step.update(kind=kind.value, strength=strength, params=sample_params(spec, shape, rng))
    trace.append(step)

    step = {"layer": "dropout", "applied": rng.random() < sched.p_dropout}
    if step["applied"]:
        step["box"] = sample_erase_box(h, w, sched.dropout_area, sched.dropout_aspect, rng)
    trace.append(step)
    return trace


def replay_idbh(sched: IdbhSchedule, trace: Sequence[dict], img: np.ndarray) -> np.ndarray:
    """Apply recorded layer decisions to ``img``; no randomness involved."""
    out = np.asarray(img, dtype=DTYPE)
    for step in trace:
        if not step["applied"]:
            continue
        layer = step["layer"]
        if layer == "flip":
            out = hflip(out)
        elif layer == "crop":
            out = _cs.cropshift_fixed(out, _cs.CropshiftParams(**step["params"]), sched.fill)
        elif layer == "colorshape":
            spec = TransformSpec(step["kind"], step["strength"], fill=sched.fill)
            out = apply_params(spec, step["params"], out)
        elif layer == "dropout":
            out = erase_box(out, step["box"], sched.erase_noise, sched.fill)
        else:
            raise ValueError(f"unknown layer {layer!r} in trace")
    if out is img:
        out = out.copy()
    return out


def apply_idbh(sched: IdbhSchedule, img: np.ndarray, rng: RngStream) -> np.ndarray:
    img = np.asarray(img, dtype=DTYPE)
    return replay_idbh(sched, sample_idbh(sched, img.shape, rng), img)


class IdbhAugment:
    """Per-image sampler wrapping a schedule: ``aug(img, rng) -> img``."""

    def __init__(self, schedule: IdbhSchedule):
        self.schedule = schedule

    def __call__(self, img, rng):
        return apply_idbh(self.schedule, img, rng)

    def __repr__(self):
        return f"IdbhAugment({schedule_label(self.schedule)})"


# ---------------------------------------------------------------------------
# search space

@dataclass(frozen=True)
class CropCombo:
    crop_range: tuple[int, int]
    probability: float


@dataclass(frozen=True)
class DropoutCombo:
    area_range: tuple[float, float] | None
    probability: float


def _default_crop_combos() -> tuple[CropCombo, ...]:
    return tuple(CropCombo((0, hi), p) for hi in (4, 6, 8, 10) for p in (0.5, 1.0))


def _default_dropout_combos() -> tuple[DropoutCombo, ...]:
    combos = [DropoutCombo(None, 0.0)]
    combos += [DropoutCombo((0.02, hi), p) for hi in (0.33, 0.5) for p in (0.5, 1.0)]
    return tuple(combos)


@dataclass(frozen=True)
class SearchSpace:
    crop_combos: tuple[CropCombo, ...] = field(default_factory=_default_crop_combos)
    versions: tuple[ColorShapeLayer, ...] = field(
        default_factory=lambda: (color_biased(), shape_biased()))
    dropout_combos: tuple[DropoutCombo, ...] = field(default_factory=_default_dropout_combos)
    p_flip: float = 0.5
    p_color_shape: float = 1.0

    def __len__(self) -> int:
        return len(self.crop_combos) * len(self.versions) * len(self.dropout_combos)

    def to_dict(self) -> dict:
        return {
            "flip": {"probability": self.p_flip},
            "crop": [{"range": list(c.crop_range), "probability": c.probability}
                     for c in self.crop_combos],
            "colorshape": {"probability": self.p_color_shape,
                           "versions": [IdbhSchedule(color_shape=v).to_dict()["colorshape"]
                                        for v in self.versions]},
            "dropout": [{"range": None if d.area_range is None else list(d.area_range),
                         "probability": d.probability} for d in self.dropout_combos],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        default = cls()
        crops = tuple(CropCombo(tuple(c["range"]), c["probability"]) for c in doc["crop"]) \
            if "crop" in doc else default.crop_combos
        drops = tuple(DropoutCombo(None if d.get("range") is None else tuple(d["range"]),
                                   d["probability"]) for d in doc["dropout"]) \
            if "dropout" in doc else default.dropout_combos
        cs = doc.get("colorshape", {})
        versions = default.versions
        if "versions" in cs:
            versions = tuple(IdbhSchedule.from_dict({"colorshape": v}).color_shape
                             for v in cs["versions"])
        return cls(crops, versions, drops, doc.get("flip", {}).get("probability", 0.5),
                   cs.get("probability", 1.0))

    @classmethod
    def load(cls, path) -> "SearchSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))


def enumerate_search_space(space: SearchSpace) -> list[IdbhSchedule]:
    """All schedules in the space: crop combo major, colour/shape version, dropout minor."""
    out = []
    for crop in space.crop_combos:
        for version in space.versions:
            for drop in space.dropout_combos:
                out.append(IdbhSchedule(
                    p_flip=space.p_flip,
                    p_crop=crop.probability,
                    crop_range=crop.crop_range,
                    p_color_shape=space.p_color_shape,
                    color_shape=version,
                    p_dropout=0.0 if drop.area_range is None else drop.probability,
                    dropout_area=(0.02, 0.33) if drop.area_range is None else drop.area_range,
                ))
    return out


def schedule_label(s: IdbhSchedule) -> str:
    crop = f"crop{s.crop_range[0]}-{s.crop_range[1]}@{s.p_crop:g}"
    drop = "erase-off" if s.p_dropout == 0 else \
        f"erase{s.dropout_area[0]:g}-{s.dropout_area[1]:g}@{s.p_dropout:g}"
    return f"{crop}_{s.color_shape.bias}@{s.p_color_shape:g}_{drop}"


def _hardness_vector(s: IdbhSchedule) -> tuple[float, ...]:
    drop = (s.p_dropout, s.dropout_area[1]) if s.p_dropout > 0 else (0.0, 0.0)
    return (s.p_flip, s.p_crop, s.crop_range[0], s.crop_range[1], s.p_color_shape) + drop


def at_least_as_hard(a: IdbhSchedule, b: IdbhSchedule) -> bool:
    """True if ``a`` is no weaker than ``b`` in every layer.

    Colour/shape layers are only comparable when identical.
    """
    if a.color_shape != b.color_shape:
        return False
    return all(x >= y for x, y in zip(_hardness_vector(a), _hardness_vector(b)))


def harder(a: IdbhSchedule, b: IdbhSchedule) -> bool:
    return at_least_as_hard(a, b) and _hardness_vector(a) != _hardness_vector(b)


# ---------------------------------------------------------------------------
# grid search

@dataclass(frozen=True)
class RobustnessScore:
    best_robustness: float
    end_robustness: float
    best_accuracy: float
    end_accuracy: float


@dataclass
class GridResult:
    schedule_id: str
    schedule: IdbhSchedule
    status: str  # "evaluated" | "skipped" | "failed"
    score: RobustnessScore | None = None
    reason: str = ""
    dominated_by: str | None = None

    def to_json(self) -> dict:
        return {"scheduleId": self.schedule_id, "schedule": self.schedule.to_dict(),
                "status": self.status, "score": None if self.score is None else asdict(self.score),
                "reason": self.reason, "dominatedBy": self.dominated_by}


class PruningPolicy(Protocol):
    def check(self, candidate: IdbhSchedule, done: Sequence[GridResult]) -> GridResult | None:
        """Return the completed result that justifies skipping ``candidate``, or None."""


class NoPruning:
    reason = ""

    def check(self, candidate, done):
        return None


class DominancePruning:
    """Skip schedules harder than one whose end accuracy fell ``margin`` below the incumbent's."""

    def __init__(self, margin: float = 0.05):
        self.margin = margin
        self.reason = f"harder than a schedule whose end accuracy is >{margin:g} below the incumbent"

    def check(self, candidate, done):
        scored = [r for r in done if r.status == "evaluated"]
        if not scored:
            return None
        incumbent = max(scored, key=lambda r: r.score.best_robustness)
        floor = incumbent.score.end_accuracy - self.margin
        for r in scored:
            if r.score.end_accuracy < floor and harder(candidate, r.schedule):
                return r
        return None


class ConsecutiveDropPruning:
    """Skip schedules harder than the end of a chain of ``patience`` successive robustness drops.

    A chain is a sequence of evaluated schedules, each harder than the last,
    whose best robustness strictly decreases at every link.
    """

    def __init__(self, patience: int = 2):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.reason = f"harder than the end of {patience} consecutive robustness drops"

    def check(self, candidate, done):
        scored = [r for r in done if r.status == "evaluated"]
        # drops[i] = longest strictly-decreasing hardening chain ending at scored[i]
        order = sorted(range(len(scored)), key=lambda i: _hardness_vector(scored[i].schedule))
        drops = {}
        for i in order:
            ri = scored[i]
            best = 0
            for j in order:
                if j == i or j not in drops:
                    continue
                rj = scored[j]
                if harder(ri.schedule, rj.schedule) and \
                        ri.score.best_robustness < rj.score.best_robustness:
                    best = max(best, drops[j] + 1)
            drops[i] = best
        for i, r in enumerate(scored):
            if drops[i] >= self.patience and harder(candidate, r.schedule):
                return r
        return None


def _rank(results: Iterable[GridResult]) -> list[GridResult]:
    results = list(results)
    evaluated = [r for r in results if r.status == "evaluated"]
    evaluated.sort(key=lambda r: -r.score.best_robustness)
    rest = [r for r in results if r.status == "skipped"] + \
        [r for r in results if r.status == "failed"]
    return evaluated + rest


def _load_progress(path: Path, by_id: dict[str, IdbhSchedule]) -> dict[str, GridResult]:
    done = {}
    if not path.exists():
        return done
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        sid = rec["scheduleId"]
        if sid not in by_id:
            raise ValueError(f"progress file {path} mentions unknown schedule {sid}")
        if rec["schedule"] != by_id[sid].to_dict():
            raise ValueError(f"progress file {path} disagrees with the search space on {sid}")
        score = None if rec["score"] is None else RobustnessScore(**rec["score"])
        done[sid] = GridResult(sid, by_id[sid], rec["status"], score, rec.get("reason", ""),
                               rec.get("dominatedBy"))
    return done


def grid_search(space: SearchSpace | Sequence[IdbhSchedule],
                evaluator: Callable[[IdbhSchedule], RobustnessScore],
                pruning: PruningPolicy | None = None,
                progress_path=None, workers: int = 1) -> list[GridResult]:
    """Evaluate every schedule unless the pruning policy rules it out.

    Results come back ranked by best robustness (descending), followed by
    skipped and failed schedules. With ``progress_path`` each finished
    schedule is appended to a JSON-lines file, and schedules already recorded
    there are not evaluated again.
    """
    schedules = enumerate_search_space(space) if isinstance(space, SearchSpace) else list(space)
    pruning = pruning or NoPruning()
    ids = [schedule_label(s) for s in schedules]
    if len(set(ids)) != len(ids):
        raise ValueError("search space contains duplicate schedules")
    by_id = dict(zip(ids, schedules))

    progress = Path(progress_path) if progress_path else None
    done: dict[str, GridResult] = _load_progress(progress, by_id) if progress else {}
    lock = threading.Lock()

    def record(result: GridResult) -> None:
        with lock:
            done[result.schedule_id] = result
            if progress:
                with progress.open("a") as fh:
                    fh.write(json.dumps(result.to_json(), sort_keys=True) + "\n")

    def run(sid: str, sched: IdbhSchedule) -> None:
        try:
            score = evaluator(sched)
            if not isinstance(score, RobustnessScore):
                score = RobustnessScore(*score)
            record(GridResult(sid, sched, "evaluated", score))
        except Exception as exc:  # evaluator failures must not stop the search
            log.warning("schedule %s failed: %s", sid, exc)
            record(GridResult(sid, sched, "failed", reason=f"{type(exc).__name__}: {exc}"))

    def maybe_skip(sid: str, sched: IdbhSchedule) -> bool:
        with lock:
            snapshot = list(done.values())
        culprit = pruning.check(sched, snapshot)
        if culprit is None:
            return False
        record(GridResult(sid, sched, "skipped", reason=pruning.reason,
                          dominated_by=culprit.schedule_id))
        return True

    pending = [(sid, s) for sid, s in zip(ids, schedules) if sid not in done]
    if workers <= 1:
        for sid, sched in pending:
            if not maybe_skip(sid, sched):
                run(sid, sched)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = []
            for sid, sched in pending:
                if not maybe_skip(sid, sched):
                    futures.append(pool.submit(run, sid, sched))
            for f in futures:
                f.result()

    return _rank(done[sid] for sid in ids)


def write_results_csv(results: Sequence[GridResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scheduleId", "bestRobustness", "endRobustness", "bestAccuracy",
                         "endAccuracy", "status"])
        for r in results:
            s = r.score
            writer.writerow([r.schedule_id,
                             "" if s is None else f"{s.best_robustness:.6f}",
                             "" if s is None else f"{s.end_robustness:.6f}",
                             "" if s is None else f"{s.best_accuracy:.6f}",
                             "" if s is None else f"{s.end_accuracy:.6f}",
                             r.status])


# ---------------------------------------------------------------------------
# diversity protocols

TYPE_DIVERSITY_POOL = tuple(k.value for k in SHAPE_KINDS + COLOR_KINDS[:5])


class TypeDiversitySampler:
    """Applies one transform chosen uniformly from a fixed pool to each image."""

    def __init__(self, specs: Sequence[TransformSpec]):
        self.specs = tuple(specs)

    def pick(self, rng: RngStream) -> int | None:
        if not self.specs:
            return None
        return rng.uniform_int(0, len(self.specs) - 1)

    def __call__(self, img, rng):
        i = self.pick(rng)
        if i is None:
            return np.asarray(img, dtype=DTYPE).copy()
        return apply_transform(self.specs[i], img, rng)


def type_diversity_pool(kinds: Sequence[str], degree: int, pool_size: int, rng: RngStream,
                        calibration: CalibrationTable) -> TypeDiversitySampler:
    """Draw ``pool_size`` of ``kinds`` (at one hardness degree) to form a per-image sampler."""
    kinds = list(kinds)
    for k in kinds:
        if k.startswith(("Cutout", "Cropshift")):
            raise ValueError(f"{k} is excluded from the type-diversity pool")
    if not 0 <= pool_size <= len(kinds):
        raise ValueError(f"pool size {pool_size} outside [0, {len(kinds)}]")
    chosen = rng.generator.choice(len(kinds), size=pool_size, replace=False) if pool_size else []
    specs = [calibrated_spec(kinds[int(i)], degree, calibration) for i in sorted(chosen)]
    return TypeDiversitySampler(specs)


class StrengthDiversitySampler:
    """Samples a hardness degree uniformly per image and applies the calibrated transform."""

    def __init__(self, degrees: Sequence[int], specs: dict[int, TransformSpec]):
        self.degrees = tuple(degrees)
        self.specs = specs

    def sample_degree(self, rng: RngStream) -> int:
        return self.degrees[rng.uniform_int(0, len(self.degrees) - 1)]

    def sample_spec(self, rng: RngStream) -> TransformSpec:
        return self.specs[self.sample_degree(rng)]

    def __call__(self, img, rng):
        return apply_transform(self.sample_spec(rng), img, rng)


def strength_diversity_sampler(kind: str, degrees: Iterable[int], calibration: CalibrationTable,
                               rng: RngStream | None = None,
                               image_shape: Sequence[int] | None = None) -> StrengthDiversitySampler:
    """Per-image sampler over a set of hardness degrees.

    Single-location kinds (``Cutout-i-1``, ``Cropshift-1``) get their location
    fixed once per degree here, which needs ``rng`` and ``image_shape``.
    """
    degrees = sorted(set(int(d) for d in degrees))
    if not degrees:
        raise ValueError("degree range must be non-empty")
    specs = {d: calibrated_spec(kind, d, calibration) for d in degrees}
    if str(kind).endswith("-1"):
        if rng is None or image_shape is None:
            raise ValueError(f"{kind} needs rng and image_shape to fix its locations")
        specs = {d: fix_spec(s, image_shape, rng) for d, s in specs.items()}
    return StrengthDiversitySampler(degrees, specs)


STRENGTH_DIVERSITY_RANGES = ((4,), (3, 4, 5), (2, 3, 4, 5, 6), (1, 2, 3, 4, 5, 6, 7))


class FixedAugment:
    """One spec applied to every image (fixed- or random-mode)."""

    def __init__(self, spec: TransformSpec):
        self.spec = spec

    def __call__(self, img, rng):
        return apply_transform(self.spec, img, rng)


def spatial_variant(kind: str, strength: float, rng: RngStream,
                    image_shape: Sequence[int]) -> FixedAugment:
    """Cutout-i / Cropshift (random location) or Cutout-i-1 / Cropshift-1 (location fixed now)."""
    spec = make_spec(kind, strength)
    if kind.endswith("-1"):
        spec = fix_spec(spec, image_shape, rng)
    return FixedAugment(spec)
