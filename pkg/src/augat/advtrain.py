"""PGD attacks, adversarial training, robustness tracking and the hardness metric."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .imagecore import DTYPE, Dataset, RngStream
from .nn import AveragedModel, Model, OptimizerState, loss_and_grads, predict, sgd_step, swa_update

log = logging.getLogger(__name__)

Augmentation = Callable[[np.ndarray, RngStream], np.ndarray]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


def stream_key(*parts) -> int:
    """Stable 64-bit stream id from a tuple of labels and integers."""
    blob = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class AttackConfig:
    """L-infinity PGD settings. ``init`` is "random" (uniform in the ball) or "zero"."""

    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    restarts: int = 1
    init: str = "random"
    norm: str = "linf"

    def __post_init__(self):
        if self.norm != "linf":
            raise ValueError(f"only the linf norm is supported, got {self.norm!r}")
        if self.init not in ("random", "zero"):
            raise ValueError(f"init must be 'random' or 'zero', got {self.init!r}")
        if self.epsilon < 0 or self.step_size < 0 or self.steps < 0 or self.restarts < 1:
            raise ValueError(f"invalid attack config {self}")

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return AttackConfig(epsilon, self.step_size, self.steps, self.restarts, self.init, self.norm)


PGD10 = AttackConfig(steps=10)
PGD50 = AttackConfig(steps=50)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x)
    return x if x.dtype == np.float64 else x.astype(DTYPE)


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    max_loss: np.ndarray
    fooled: np.ndarray


def _ball_bounds(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel [lo, hi] inside [0, 1] and within ``epsilon`` of ``x`` when compared in float64."""
    x64 = x.astype(np.float64)
    lo = np.maximum(x64 - epsilon, 0).astype(x.dtype)
    hi = np.minimum(x64 + epsilon, 1).astype(x.dtype)
    # rounding to the working dtype can step outside the ball by one ulp
    lo = np.where(x64 - lo > epsilon, np.nextafter(lo, x.dtype.type(1)), lo)
    hi = np.where(hi - x64 > epsilon, np.nextafter(hi, x.dtype.type(0)), hi)
    return lo, hi


def _project(x_adv: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    np.clip(x_adv, lo, hi, out=x_adv)
    return x_adv


def _random_start(x: np.ndarray, epsilon: float, lo, hi, rng: RngStream) -> np.ndarray:
    delta = rng.generator.uniform(-epsilon, epsilon, size=x.shape).astype(x.dtype)
    return _project(x + delta, lo, hi)


def pgd_search(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               rng: RngStream) -> AttackOutcome:
    """PGD with per-example selection over every iterate of every restart.

    An example's returned point is a misclassified iterate if any was found
    (the highest-loss one among those), otherwise the highest-loss iterate.
    ``max_loss`` is the largest loss seen over all iterates, which makes it
    monotone in the number of steps and restarts for a fixed stream.
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    if cfg.epsilon == 0:
        g = loss_and_grads(model, x, y, params=False, inputs=False)
        return AttackOutcome(x.copy(), g.losses, g.logits.argmax(axis=1) != y)

    alpha = x.dtype.type(cfg.step_size)
    lo, hi = _ball_bounds(x, cfg.epsilon)

    best_x = x.copy()
    best_key = np.full(len(x), -np.inf)
    max_loss = np.full(len(x), -np.inf)
    fooled = np.zeros(len(x), dtype=bool)

    def consider(point, losses, logits):
        wrong = logits.argmax(axis=1) != y
        # misclassified beats correct; within a class, higher loss wins
        key = losses + np.where(wrong, 1e6, 0.0)
        better = key > best_key
        best_x[better] = point[better]
        best_key[better] = key[better]
        np.maximum(max_loss, losses, out=max_loss)
        fooled[wrong] = True

    for _ in range(cfg.restarts):
        x_adv = _random_start(x, cfg.epsilon, lo, hi, rng) if cfg.init == "random" else x.copy()
        for _ in range(cfg.steps):
            g = loss_and_grads(model, x_adv, y, params=False)
            consider(x_adv, g.losses, g.logits)
            x_adv = _project(x_adv + alpha * np.sign(g.inputs), lo, hi)
        g = loss_and_grads(model, x_adv, y, params=False, inputs=False)
        consider(x_adv, g.losses, g.logits)
    return AttackOutcome(best_x, max_loss, fooled)


def pgd_attack(model: Model, batch, labels, cfg: AttackConfig, rng: RngStream) -> np.ndarray:
    """Adversarial batch inside the epsilon ball and [0, 1]."""
    return pgd_search(model, batch, labels, cfg, rng).adversarial


def pgd_last_iterate(model: Model, batch, labels, cfg: AttackConfig, rng: RngStream) -> np.ndarray:
    """Plain PGD returning the final iterate (cheaper; used for training)."""
    x = _as_batch(batch)
    y = np.asarray(labels, dtype=np.int64)
    if cfg.epsilon == 0 or cfg.steps == 0 and cfg.init == "zero":
        return x.copy()
    lo, hi = _ball_bounds(x, cfg.epsilon)
    x_adv = _random_start(x, cfg.epsilon, lo, hi, rng) if cfg.init == "random" else x.copy()
    alpha = x.dtype.type(cfg.step_size)
    for _ in range(cfg.steps):
        g = loss_and_grads(model, x_adv, y, params=False)
        x_adv = _project(x_adv + alpha * np.sign(g.inputs), lo, hi)
    return x_adv


def evaluate_robustness(model: Model, data: Dataset, cfg: AttackConfig, seed: int = 0,
                        batch_size: int = 500) -> float:
    """Fraction of examples still classified correctly after the attack."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for b, start in enumerate(range(0, len(data), batch_size)):
        x = data.images[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        out = pgd_search(model, x, y, cfg, RngStream(seed, stream_key("eval", b)))
        correct += int((~out.fooled).sum())
    return correct / len(data)


def clean_accuracy(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(model, data.images) == data.labels).mean())


# ---------------------------------------------------------------------------
# hardness

@dataclass(frozen=True)
class HardnessReport:
    base_robustness: float
    augmented_robustness: float
    hardness: float
    unbounded: bool = False


def hardness_ratio(base: float, augmented: float) -> HardnessReport:
    """Base over augmented robustness; zero augmented robustness gives inf (or nan for 0/0), flagged."""
    if augmented == 0:
        return HardnessReport(base, augmented, math.inf if base > 0 else math.nan, True)
    return HardnessReport(base, augmented, base / augmented)


def augment_dataset(data: Dataset, augmentation: Augmentation, seed: int) -> Dataset:
    """Apply ``augmentation`` once per image, image i using stream (seed, i)."""
    out = np.stack([augmentation(img, RngStream(seed, stream_key("test-aug", i)))
                    for i, img in enumerate(data.images)]) if len(data) else data.images
    return Dataset(out, data.labels, data.class_count)


def measure_hardness(model: Model, test_data: Dataset, augmentation: Augmentation,
                     cfg: AttackConfig = PGD50, seed: int = 0) -> HardnessReport:
    """Robustness on the clean test set divided by robustness on its augmented copy."""
    base = evaluate_robustness(model, test_data, cfg, seed)
    augmented = evaluate_robustness(model, augment_dataset(test_data, augmentation, seed), cfg, seed)
    return hardness_ratio(base, augmented)


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    epsilon: float
    train_loss: float
    clean_accuracy: float
    robust_accuracy: float


@dataclass
class TrainReport:
    """Per-epoch curve plus best/end summaries.

    The best epoch is the first one reaching the maximum tracked robustness.
    ``gap`` is best minus end robustness.
    """

    epochs: list[EpochRecord] = field(default_factory=list)
    seed: int = 0
    eval_subset: list[int] | None = None
    final_eval: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def robustness_curve(self) -> list[float]:
        return [r.robust_accuracy for r in self.epochs]

    @property
    def best_epoch(self) -> int | None:
        curve = self.robustness_curve
        return int(np.argmax(curve)) if curve else None

    @property
    def best_robustness(self) -> float | None:
        return max(self.robustness_curve) if self.epochs else None

    @property
    def end_robustness(self) -> float | None:
        return self.epochs[-1].robust_accuracy if self.epochs else None

    @property
    def best_accuracy(self) -> float | None:
        return self.epochs[self.best_epoch].clean_accuracy if self.epochs else None

    @property
    def end_accuracy(self) -> float | None:
        return self.epochs[-1].clean_accuracy if self.epochs else None

    @property
    def gap(self) -> float | None:
        return None if not self.epochs else self.best_robustness - self.end_robustness

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_robustness": self.best_robustness,
                "end_robustness": self.end_robustness, "best_accuracy": self.best_accuracy,
                "end_accuracy": self.end_accuracy, "gap": self.gap}

    def to_json(self) -> dict:
        return {"seed": self.seed, "meta": self.meta, "summary": self.summary(),
                "epochs": [asdict(r) for r in self.epochs], "eval_subset": self.eval_subset,
                "final_eval": self.final_eval}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, doc: dict) -> "TrainReport":
        return cls([EpochRecord(**r) for r in doc["epochs"]], doc.get("seed", 0),
                   doc.get("eval_subset"), doc.get("final_eval"), doc.get("meta", {}))

    CSV_FIELDS = ("seed", "epochs", "best_epoch", "best_robustness", "end_robustness",
                  "best_accuracy", "end_accuracy", "gap")

    def csv_row(self) -> dict:
        row = {"seed": self.seed, "epochs": len(self.epochs), **self.summary()}
        return {k: ("" if row[k] is None else row[k]) for k in self.CSV_FIELDS}

    def dumps_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()


def epsilon_warmup(epoch: int, warmup_epochs: int, target: float) -> float:
    """Linear ramp reaching ``target`` at epoch ``warmup_epochs - 1``."""
    if warmup_epochs < 1:
        raise ValueError("warmup_epochs must be at least 1")
    return target * min(1.0, (epoch + 1) / warmup_epochs)


def _augment_batch(images: np.ndarray, indices: np.ndarray, augmentation: Augmentation | None,
                   apply_probability: float, seed: int, epoch: int) -> np.ndarray:
    if augmentation is None or apply_probability <= 0:
        return images
    out = images.copy()
    for j, idx in enumerate(indices):
        rng = RngStream(seed, stream_key("train-aug", epoch, int(idx)))
        if apply_probability >= 1 or rng.random() < apply_probability:
            out[j] = augmentation(images[j], rng)
    return out


def adversarial_train(model: Model, train_data: Dataset, augmentation: Augmentation | None,
                      cfg: AttackConfig, opt: OptimizerState, epochs: int,
                      track_cfg: AttackConfig | None = None, apply_probability: float = 1.0,
                      *, test_data: Dataset | None = None, batch_size: int = 128, seed: int = 0,
                      eps_warmup_epochs: int | None = None, swa: AveragedModel | None = None,
                      on_epoch: Callable[[EpochRecord], None] | None = None
                      ) -> tuple[Model, Model, TrainReport]:
    """PGD adversarial training with per-epoch robustness tracking.

    ``model`` is updated in place and returned as the final model together
    with a copy of the best-tracked checkpoint. Robustness is tracked on
    ``test_data`` (defaults to the training set) with ``track_cfg``. Each
    image is augmented with probability ``apply_probability``. If ``swa`` is
    given it absorbs a snapshot at the end of every epoch from its start epoch on.
    """
    if not 0 <= apply_probability <= 1:
        raise ValueError("apply_probability must lie in [0, 1]")
    track_cfg = track_cfg or PGD10
    track_data = test_data if test_data is not None else train_data
    report = TrainReport(seed=seed, eval_subset=[0, len(track_data)])
    best = model.copy()
    best_rob = -1.0
    n = len(train_data)

    for epoch in range(epochs):
        eps = cfg.epsilon if eps_warmup_epochs is None else \
            epsilon_warmup(epoch, eps_warmup_epochs, cfg.epsilon)
        attack = cfg.with_epsilon(eps)
        order = RngStream(seed, stream_key("shuffle", epoch)).generator.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            x = _augment_batch(train_data.images[idx], idx, augmentation, apply_probability,
                               seed, epoch)
            y = train_data.labels[idx]
            x_adv = pgd_last_iterate(model, x, y, attack, RngStream(seed, stream_key("pgd", epoch, b)))
            g = loss_and_grads(model, x_adv, y, inputs=False)
            if not math.isfinite(g.loss):
                raise TrainingDiverged(f"non-finite loss {g.loss} at epoch {epoch}, batch {b}")
            sgd_step(model, g.params, opt, epoch)
            losses.append(g.loss * len(idx))

        rob = evaluate_robustness(model, track_data, track_cfg, seed=seed)
        rec = EpochRecord(epoch, opt.lr_at(epoch), eps, sum(losses) / n,
                          clean_accuracy(model, track_data), rob)
        report.epochs.append(rec)
        log.info("epoch %d lr %.4g loss %.4f clean %.4f robust %.4f", epoch, rec.learning_rate,
                 rec.train_loss, rec.clean_accuracy, rec.robust_accuracy)
        if rob > best_rob:
            best_rob = rob
            best = model.copy()
        if swa is not None and epoch >= swa.start_epoch:
            swa_update(swa, model)
        if on_epoch is not None:
            on_epoch(rec)

    return model, best, report


def final_evaluation(models: dict[str, Model], data: Dataset, cfg: AttackConfig,
                     seed: int = 0) -> dict:
    """Clean accuracy and robustness under ``cfg`` for each named model."""
    out = {"attack": asdict(cfg)}
    for name, m in models.items():
        out[name] = {"clean_accuracy": clean_accuracy(m, data),
                     "robustness": evaluate_robustness(m, data, cfg, seed)}
    return out


# ---------------------------------------------------------------------------
# strength calibration

@dataclass
class CalibrationResult:
    target: float
    strength: float | None
    achieved: float | None
    iterations: int
    reachable: bool


def calibrate_strength(robustness_at: Callable[[float], float], target: float, low: float,
                       high: float, tolerance: float = 0.005, max_iterations: int = 20,
                       integer: bool = False) -> CalibrationResult:
    """Bisect the strength whose robustness hits ``target`` within ``tolerance``.

    ``robustness_at`` must be monotone in strength over [low, high] (either
    direction). If the target lies outside the bracket by more than the
    tolerance the level is unreachable. The iteration count covers only
    bisection steps, not the two bracket evaluations.
    """
    r_low, r_high = robustness_at(low), robustness_at(high)
    for s, r in ((low, r_low), (high, r_high)):
        if abs(r - target) <= tolerance:
            return CalibrationResult(target, s, r, 0, True)
    if not min(r_low, r_high) - tolerance <= target <= max(r_low, r_high) + tolerance:
        return CalibrationResult(target, None, None, 0, False)
    decreasing = r_high < r_low
    lo, hi = low, high
    best = (abs(r_low - target), low, r_low)
    for it in range(1, max_iterations + 1):
        mid = (lo + hi) / 2
        if integer:
            mid = math.floor(mid)
            if mid <= lo:
                break
        r = robustness_at(mid)
        if abs(r - target) < best[0]:
            best = (abs(r - target), mid, r)
        if abs(r - target) <= tolerance:
            return CalibrationResult(target, mid, r, it, True)
        if (r > target) == decreasing:
            lo = mid
        else:
            hi = mid
        if integer and hi - lo <= 1:
            break
    else:
        it = max_iterations
    if abs(r_high - target) < best[0]:
        best = (abs(r_high - target), high, r_high)
    # closest strength found; reachable only if within tolerance
    return CalibrationResult(target, best[1], best[2], it, best[0] <= tolerance)


def calibrate_kind(robustness_at: Callable[[float], float], targets: Sequence[float], low: float,
                   high: float, tolerance: float = 0.005, max_iterations: int = 20,
                   integer: bool = False) -> list[CalibrationResult]:
    cache: dict[float, float] = {}

    def cached(s: float) -> float:
        if s not in cache:
            cache[s] = robustness_at(s)
        return cache[s]

    return [calibrate_strength(cached, t, low, high, tolerance, max_iterations, integer)
            for t in targets]
