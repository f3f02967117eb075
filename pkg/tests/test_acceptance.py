"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import itertools
import json
import math
import statistics
import time

import numpy as np
import pytest
from scipy import stats

from augat.advtrain import (AttackConfig, adversarial_train, epsilon_warmup, measure_hardness,
                            pgd_attack)
from augat.cli import cmd_calibrate_hardness, main
from augat.config import RunConfig
from augat.cropshift import cropshift_fixed, sample_composition, sample_params
from augat.data import (CIFAR_RECORD, DataError, SyntheticSpec, dump_cifar_binary,
                        make_synthetic, parse_cifar_binary, split)
from augat.idbh import IdbhAugment, IdbhSchedule, SearchSpace, enumerate_search_space
from augat.imagecore import RngStream
from augat.nn import (CENTER, FLATTEN, RELU, Model, OptimizerState, build_model, conv, dense,
                      default_architecture, loss_and_grads)
from augat.transforms import autocontrast, equalize
from test_advtrain import fgsm_closed_form, linear_model
from test_transforms import naive_autocontrast, naive_equalize

EPS = 8 / 255


@pytest.fixture
def verdict(capsys):
    def record(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return record


def test_01_cropshift_composition_uniformity(verdict):
    start = time.perf_counter()
    brute = [c for c in itertools.product(range(5), repeat=4) if sum(c) == 4]
    rng = RngStream(2024, 1)
    counts = dict.fromkeys(brute, 0)
    for _ in range(100_000):
        counts[sample_composition(4, rng)] += 1
    p = stats.chisquare(list(counts.values())).pvalue
    elapsed = time.perf_counter() - start
    ok = len(brute) == 35 and len(counts) == 35 and p > 0.001 and elapsed < 10
    verdict(1, "cropshift composition uniformity",
            ok, f"{len(brute)} compositions, chi-square p={p:.4f}, {elapsed:.1f}s")


def mapped_source_oracle(img, p, fill):
    """Pixel-by-pixel inverse map of the crop placement."""
    h, w, _ = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            sy, sx = y - p.shift_y + p.top, x - p.shift_x + p.left
            inside = p.top <= sy < h - p.bottom and p.left <= sx < w - p.right
            out[y, x] = img[sy, sx] if inside else fill
    return out


def test_02_cropshift_pixel_conservation(verdict):
    g = np.random.default_rng(7)
    mismatches = 0
    for i in range(1000):
        h, w = int(g.integers(9, 17)), int(g.integers(9, 17))
        img = g.random((h, w, 3)).astype(np.float32)
        n = int(g.integers(0, 9))
        p = sample_params(n, h, w, RngStream(i, 2))
        out = cropshift_fixed(img, p, fill=0.25)
        mismatches += not np.array_equal(out, mapped_source_oracle(img, p, np.float32(0.25)))
    img = g.random((12, 12, 3)).astype(np.float32)
    identity = cropshift_fixed(img, sample_params(0, 12, 12, RngStream(0)))
    ok = mismatches == 0 and identity.tobytes() == img.tobytes()
    verdict(2, "cropshift pixel conservation", ok, f"{mismatches} mismatching of 1000; N=0 identity")


def test_03_search_space_cardinality(verdict):
    n = len(enumerate_search_space(SearchSpace()))
    verdict(3, "search-space cardinality", n == 80, f"{n} schedules")


def test_04_pgd_soundness(verdict):
    model = build_model((8, 8, 3), 4, [CENTER, conv(8), RELU, conv(8, stride=2, padding=1), RELU],
                        seed=3)
    g = np.random.default_rng(4)
    worst, outside, total = 0.0, 0, 0
    for steps in (10, 50):
        cfg = AttackConfig(epsilon=EPS, step_size=2 / 255, steps=steps)
        for b in range(10):
            x = g.random((1000, 8, 8, 3)).astype(np.float32)
            saturate = g.random(x.shape) < 0.2
            x[saturate] = np.round(x[saturate])
            y = g.integers(0, 4, 1000)
            adv = pgd_attack(model, x, y, cfg, RngStream(steps, b))
            worst = max(worst, float(np.abs(adv.astype(np.float64) - x).max()))
            outside += int(np.sum((adv < 0).any(axis=(1, 2, 3)) | (adv > 1).any(axis=(1, 2, 3))))
            total += len(x)
    fgsm_err = 0.0
    for seed in range(5):
        m = linear_model(seed)
        x = np.random.default_rng(seed).random((64, 4, 4, 3)).astype(np.float32)
        y = np.random.default_rng(seed + 1).integers(0, 2, 64)
        cfg = AttackConfig(epsilon=EPS, step_size=EPS, steps=1, init="zero")
        got = pgd_attack(m, x, y, cfg, RngStream(0))
        fgsm_err = max(fgsm_err, float(np.abs(got - fgsm_closed_form(m, x, y, EPS, EPS)).max()))
    ok = worst <= EPS + 1e-6 and outside == 0 and fgsm_err <= 1e-6 and total == 20_000
    verdict(4, "PGD soundness", ok,
            f"{total} attacked, max |x'-x| - eps = {worst - EPS:.2e}, {outside} outside [0,1], "
            f"FGSM max error {fgsm_err:.1e}")


LAYER_ARCHS = {
    "conv": [conv(3, 3, 1)],
    "conv-strided": [conv(3, 3, 2, 1)],
    "relu": [conv(3, 3, 1), RELU],
    "center": [CENTER, conv(2, 3, 1)],
    "flatten+dense": [FLATTEN, dense(6)],
}


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_05_gradient_correctness(verdict):
    start = time.perf_counter()
    worst = {}
    for name, arch in LAYER_ARCHS.items():
        worst[name] = 0.0
        for seed in range(20):
            m = build_model((8, 8, 3), 3, arch, seed=seed)
            for k in m.params:
                m.params[k] = m.params[k].astype(np.float64)
            g = np.random.default_rng(seed)
            x = g.random((2, 8, 8, 3))
            y = g.integers(0, 3, 2)
            grads = loss_and_grads(m, x, y)
            loss = lambda: loss_and_grads(m, x, y, params=False, inputs=False).loss
            probes = [(arr, grads.params[k]) for k, arr in m.params.items()] + [(x, grads.inputs)]
            for arr, analytic in probes:
                for _ in range(4):
                    idx = tuple(int(g.integers(0, s)) for s in arr.shape)
                    old = arr[idx]
                    arr[idx] = old + 1e-6
                    up = loss()
                    arr[idx] = old - 1e-6
                    down = loss()
                    arr[idx] = old
                    numeric = (up - down) / 2e-6
                    if abs(numeric) > 1e-7 or abs(analytic[idx]) > 1e-7:
                        worst[name] = max(worst[name], relative_error(numeric, analytic[idx]))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-3 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(5, "gradient correctness", ok, f"max relative error {detail}; {elapsed:.1f}s")


def test_06_hardness_metric_sanity(verdict, tmp_path):
    data = make_synthetic(SyntheticSpec(count=120, size=8, margin=0.3, seed=1))
    model = build_model((8, 8, 3), 2, [conv(4), RELU], seed=1)
    identity = measure_hardness(model, data, lambda img, rng: img, AttackConfig(steps=5), seed=0)

    base = 0.4693
    cfg = RunConfig.build(overrides={"output": str(tmp_path), "calibration.kinds": ["Color"],
                                     "calibration.bounds": {"Color": [0.0, base]}})
    # strength is the robustness drop
    assert cmd_calibrate_hardness(cfg, lambda kind, s: base if kind is None else base - s) == 0
    levels = json.loads((tmp_path / "calibration.json").read_text())["levels"]
    worst = max(abs(r["achieved"] - r["target"]) for r in levels)
    iters = max(r["iterations"] for r in levels)
    ok = (identity.hardness == 1.0 and len(levels) == 7 and all(r["reachable"] for r in levels)
          and worst <= 0.005 and iters < 20)
    verdict(6, "hardness metric sanity", ok,
            f"identity hardness {identity.hardness}, 7 levels, max |achieved-target| {worst:.4f}, "
            f"max {iters} iterations")


# -- robust overfitting direction -------------------------------------------------

# Strong per-pixel noise gives every image a fingerprint an 8/255 attack cannot erase, and
# the wide hidden layer can memorise it; near-zero margins make part of the set non-robust.
OVERFIT_DATA = SyntheticSpec(count=3000, size=16, margin=0.5, margin_low=0.0, noise=0.2,
                             blob_sigma=4.0)
OVERFIT_ARCH = dict(channels=(16,), hidden=512)
OVERFIT_LR = 0.05
OVERFIT_BATCH = 32
IDBH_STYLE = IdbhSchedule(p_flip=0.5, p_crop=0.5, crop_range=(0, 8), p_dropout=0.5,
                          dropout_area=(0.02, 0.33))


def overfit_run(seed, augmentation):
    data = make_synthetic(SyntheticSpec(**{**OVERFIT_DATA.to_dict(), "seed": seed}))
    train, test = split(data, 2000)
    model = build_model(train.image_shape, 2, default_architecture(**OVERFIT_ARCH), seed=seed)
    opt = OptimizerState(learning_rate=OVERFIT_LR, schedule=[(20, 0.1), (30, 0.1)])
    pgd5 = AttackConfig(epsilon=EPS, step_size=2 / 255, steps=5)
    track = AttackConfig(epsilon=EPS, step_size=2 / 255, steps=10)
    _, _, report = adversarial_train(model, train, augmentation, pgd5, opt, 40, track,
                                     test_data=test, batch_size=OVERFIT_BATCH, seed=seed)
    return report


@pytest.mark.slow
def test_07_robust_overfitting_direction(verdict):
    start = time.perf_counter()
    gaps = {"none": [], "idbh": []}
    ends = {"none": [], "idbh": []}
    for seed in range(3):
        for name, aug in (("none", None), ("idbh", IdbhAugment(IDBH_STYLE))):
            rep = overfit_run(seed, aug)
            gaps[name].append(rep.gap)
            ends[name].append(rep.end_robustness)
    elapsed = time.perf_counter() - start
    med_gap = {k: statistics.median(v) for k, v in gaps.items()}
    med_end = {k: statistics.median(v) for k, v in ends.items()}
    ok = med_gap["idbh"] < med_gap["none"] and med_end["idbh"] >= med_end["none"] and elapsed < 1800
    verdict(7, "robust overfitting direction (desk scale)", ok,
            f"median gap none {med_gap['none']:.3f} vs idbh {med_gap['idbh']:.3f}; median end "
            f"robustness none {med_end['none']:.3f} vs idbh {med_end['idbh']:.3f}; "
            f"gaps {gaps}; {elapsed / 60:.1f} min")


def test_08_histogram_ops_match_oracles(verdict):
    g = np.random.default_rng(8)
    bad = 0
    for i in range(100):
        img = g.random((int(g.integers(4, 13)), int(g.integers(4, 13)), 3)).astype(np.float32)
        if i % 4 == 0:
            img = np.round(img * 20) / 20  # coarse histogram with ties
        bad += not np.array_equal(equalize(img), naive_equalize(img))
        bad += not np.array_equal(autocontrast(img), naive_autocontrast(img))
    verdict(8, "histogram-op oracle equivalence", bad == 0, f"{bad} mismatches over 100 images x 2 ops")


def test_09_epsilon_warmup(verdict):
    got = [epsilon_warmup(e, 5, EPS) for e in range(7)]
    expected = [EPS * min(1, (e + 1) / 5) for e in range(7)]
    ok = got == expected and got[5] == got[6] == EPS and got[4] == EPS
    verdict(9, "epsilon warmup schedule", ok, f"{[round(v * 255, 3) for v in got]} (x 1/255)")


def test_10_train_determinism(verdict, tmp_path):
    blobs = []
    for run in ("first", "second"):
        out = tmp_path / run
        rc = main(["train", "--seed", "11", "--epochs", "2", "--threads", "1",
                   "--set", "data.synthetic.count=120", "--output", str(out)])
        assert rc == 0
        blobs.append([(out / f).read_bytes() for f in
                      ("report.json", "report.csv", "best.ckpt", "end.ckpt")])
    same = [a == b for a, b in zip(*blobs)]
    verdict(10, "cmd_train determinism", all(same),
            f"report.json/report.csv/best.ckpt/end.ckpt identical: {same}")


def test_11_cifar_round_trip(verdict):
    g = np.random.default_rng(11)
    exact = True
    for n in (1, 7, 100):
        blob = np.concatenate([g.integers(0, 10, (n, 1)), g.integers(0, 256, (n, 3072))],
                              axis=1).astype(np.uint8).tobytes()
        data = parse_cifar_binary(blob)
        again = parse_cifar_binary(dump_cifar_binary(data))
        exact &= dump_cifar_binary(data) == blob and again.images.tobytes() == data.images.tobytes()
    truncated = blob[: 3 * CIFAR_RECORD + 500]
    try:
        parse_cifar_binary(truncated)
        message = ""
    except DataError as exc:
        message = str(exc)
    ok = exact and f"byte offset {3 * CIFAR_RECORD}" in message
    verdict(11, "CIFAR-10 binary round trip", ok, f"bit-exact {exact}; truncation: {message!r}")
