import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from augat.advtrain import (
    PGD10, AttackConfig, TrainingDiverged, TrainReport, adversarial_train, augment_dataset,
    calibrate_kind, calibrate_strength, clean_accuracy, epsilon_warmup, evaluate_robustness,
    hardness_ratio, measure_hardness, pgd_attack, pgd_last_iterate, pgd_search, stream_key,
)
from augat.imagecore import Dataset, RngStream
from augat.nn import FLATTEN, AveragedModel, Model, OptimizerState, build_model, conv, dense, RELU

EPS = 8 / 255


def tiny_model(seed=0, shape=(8, 8, 3), classes=2):
    return build_model(shape, classes, [conv(4), RELU, FLATTEN], seed=seed)


def tiny_data(n=24, seed=0, classes=2, size=8):
    g = np.random.default_rng(seed)
    return Dataset(g.random((n, size, size, 3)), g.integers(0, classes, n), classes)


def linear_model(seed, shape=(4, 4, 3), classes=2):
    m = Model(shape, classes, [FLATTEN, dense(classes)])
    g = np.random.default_rng(seed)
    m.params["1.w"] = g.normal(0, 1, m.params["1.w"].shape).astype(np.float32)
    m.params["1.b"] = g.normal(0, 0.1, classes).astype(np.float32)
    return m


def fgsm_closed_form(m, x, y, alpha, eps):
    w = m.params["1.w"].astype(np.float64)
    flat = x.reshape(len(x), -1).astype(np.float64)
    z = flat @ w + m.params["1.b"]
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1
    grad = (p @ w.T).reshape(x.shape)
    step = x + alpha * np.sign(grad)
    return np.clip(np.clip(step, x - eps, x + eps), 0, 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), steps=st.integers(0, 6), restarts=st.integers(1, 2),
       eps=st.sampled_from([1 / 255, 4 / 255, 8 / 255, 16 / 255]),
       init=st.sampled_from(["random", "zero"]))
def test_pgd_stays_in_ball_and_range(seed, steps, restarts, eps, init):
    m = tiny_model(seed % 7)
    d = tiny_data(8, seed)
    cfg = AttackConfig(epsilon=eps, step_size=eps / 2, steps=steps, restarts=restarts, init=init)
    for fn in (pgd_attack, pgd_last_iterate):
        adv = fn(m, d.images, d.labels, cfg, RngStream(seed, 1))
        diff = np.abs(adv.astype(np.float64) - d.images.astype(np.float64))
        assert diff.max() <= eps
        assert adv.min() >= 0 and adv.max() <= 1
        assert adv.dtype == np.float32


def test_pgd_ball_holds_at_extreme_pixels():
    x = np.array([0.0, 1.0, 0.5, 1e-7, 1 - 1e-7, 0.0313725], np.float32)
    x = np.broadcast_to(x, (2, 6)).reshape(2, 2, 3, 1).copy()
    m = build_model((2, 3, 1), 2, [FLATTEN], seed=3)
    adv = pgd_attack(m, x, np.array([0, 1]), AttackConfig(steps=20, step_size=0.05), RngStream(0, 0))
    assert np.abs(adv.astype(np.float64) - x).max() <= EPS


@pytest.mark.parametrize("seed", range(5))
def test_single_zero_step_matches_fgsm(seed):
    m = linear_model(seed)
    g = np.random.default_rng(100 + seed)
    x = g.random((16, 4, 4, 3)).astype(np.float32)
    y = g.integers(0, 2, 16)
    cfg = AttackConfig(epsilon=EPS, step_size=EPS, steps=1, init="zero")
    expected = fgsm_closed_form(m, x, y, EPS, EPS)
    np.testing.assert_allclose(pgd_attack(m, x, y, cfg, RngStream(0, 0)), expected, atol=1e-6)


def test_last_iterate_fgsm_three_classes():
    m = linear_model(9, classes=3)
    g = np.random.default_rng(5)
    x = g.random((10, 4, 4, 3)).astype(np.float32)
    y = g.integers(0, 3, 10)
    cfg = AttackConfig(epsilon=0.05, step_size=0.03, steps=1, init="zero")
    np.testing.assert_allclose(pgd_last_iterate(m, x, y, cfg, RngStream(0, 0)),
                               fgsm_closed_form(m, x, y, 0.03, 0.05), atol=1e-6)


def test_more_steps_never_lower_max_loss():
    m, d = tiny_model(1), tiny_data(32, 2)
    short = pgd_search(m, d.images, d.labels, AttackConfig(steps=10), RngStream(4, 4))
    long = pgd_search(m, d.images, d.labels, AttackConfig(steps=50), RngStream(4, 4))
    assert np.all(long.max_loss >= short.max_loss)
    assert np.all(long.fooled >= short.fooled)


def test_more_restarts_never_raise_robustness():
    m, d = tiny_model(2), tiny_data(40, 3)
    one = evaluate_robustness(m, d, AttackConfig(steps=5, restarts=1), seed=7)
    five = evaluate_robustness(m, d, AttackConfig(steps=5, restarts=5), seed=7)
    assert five <= one


def test_zero_epsilon_is_clean_accuracy():
    m, d = tiny_model(3), tiny_data(50, 4)
    out = pgd_search(m, d.images, d.labels, PGD10.with_epsilon(0), RngStream(0, 0))
    assert np.array_equal(out.adversarial, d.images)
    assert evaluate_robustness(m, d, PGD10.with_epsilon(0)) == clean_accuracy(m, d)


def test_untrained_model_near_chance():
    classes, n = 4, 600
    d = tiny_data(n, 11, classes=classes)
    acc = evaluate_robustness(tiny_model(5, classes=classes), d, PGD10.with_epsilon(0))
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 0.25) <= 3 * sigma


def test_evaluate_rejects_empty():
    empty = Dataset(np.zeros((0, 8, 8, 3)), np.zeros(0), 2)
    with pytest.raises(ValueError):
        evaluate_robustness(tiny_model(), empty, PGD10)


def test_evaluate_is_deterministic():
    m, d = tiny_model(6), tiny_data(30, 6)
    cfg = AttackConfig(steps=3)
    assert evaluate_robustness(m, d, cfg, seed=2) == evaluate_robustness(m, d, cfg, seed=2)


def test_identity_hardness_is_exactly_one():
    m, d = tiny_model(7), tiny_data(30, 7)
    rep = measure_hardness(m, d, lambda img, rng: img, AttackConfig(steps=3), seed=1)
    assert rep.hardness == 1.0 and not rep.unbounded


@pytest.mark.parametrize("aug,expected", [(0.45, 1.043), (0.4102, 1.144), (0.15, 3.129)])
def test_hardness_ratio_values(aug, expected):
    assert hardness_ratio(0.4693, aug).hardness == pytest.approx(expected, abs=5e-4)


def test_hardness_ratio_degenerate():
    assert hardness_ratio(0.4, 0.0).hardness == math.inf and hardness_ratio(0.4, 0.0).unbounded
    assert math.isnan(hardness_ratio(0.0, 0.0).hardness)


def test_augment_dataset_streams_are_per_image():
    d = tiny_data(5, 8)
    seen = []
    augment_dataset(d, lambda img, rng: seen.append(rng.stream_id) or img, seed=3)
    assert seen == [stream_key("test-aug", i) for i in range(5)]


def test_epsilon_warmup_linear():
    values = [epsilon_warmup(e, 5, EPS) for e in range(8)]
    assert values[:5] == [EPS * ((e + 1) / 5) for e in range(5)]
    assert values[2] == (3 / 5) * EPS
    assert values[4:] == [EPS] * 4
    assert epsilon_warmup(0, 1, EPS) == EPS
    with pytest.raises(ValueError):
        epsilon_warmup(0, 0, EPS)


def fit(epochs=2, seed=0, aug=None, **kw):
    m = tiny_model(seed)
    opt = OptimizerState(learning_rate=0.05)
    return adversarial_train(m, tiny_data(32, seed), aug, AttackConfig(steps=2), opt, epochs,
                             AttackConfig(steps=2), test_data=tiny_data(16, 99), batch_size=8,
                             seed=seed, **kw)


def test_zero_epochs_returns_initial_model():
    final, best, rep = fit(0)
    init = tiny_model(0)
    assert all(np.array_equal(final.params[k], init.params[k]) for k in init.params)
    assert all(np.array_equal(best.params[k], init.params[k]) for k in init.params)
    assert rep.epochs == [] and rep.gap is None and rep.best_epoch is None


def test_report_identities_and_best_checkpoint():
    final, best, rep = fit(3)
    assert len(rep.epochs) == 3
    assert rep.gap == rep.best_robustness - rep.end_robustness >= 0
    assert rep.robustness_curve[rep.best_epoch] == max(rep.robustness_curve)
    assert rep.best_epoch == rep.robustness_curve.index(max(rep.robustness_curve))
    track = AttackConfig(steps=2)
    assert evaluate_robustness(best, tiny_data(16, 99), track, seed=0) == rep.best_robustness
    assert evaluate_robustness(final, tiny_data(16, 99), track, seed=0) == rep.end_robustness


def test_training_is_deterministic():
    a, b = fit(2, seed=4)[2], fit(2, seed=4)[2]
    assert a.dumps() == b.dumps()


def test_augmentation_and_warmup_recorded():
    flip = lambda img, rng: img[:, ::-1]
    _, _, rep = fit(3, aug=flip, eps_warmup_epochs=2, apply_probability=0.5)
    assert [r.epsilon for r in rep.epochs] == [EPS / 2, EPS, EPS]


def test_swa_collects_from_start_epoch():
    swa = AveragedModel(tiny_model(0), start_epoch=1)
    fit(3, swa=swa)
    assert swa.count == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    m = tiny_model(0)
    m.params["0.w"][:] = np.nan
    with pytest.raises(TrainingDiverged):
        adversarial_train(m, tiny_data(8), None, AttackConfig(steps=1), OptimizerState(), 1,
                          batch_size=8)


def test_apply_probability_validated():
    with pytest.raises(ValueError):
        fit(1, apply_probability=1.5)


def test_report_json_and_csv_round_trip():
    rep = fit(2)[2]
    again = TrainReport.from_json(__import__("json").loads(rep.dumps()))
    assert again.dumps() == rep.dumps()
    header, row = rep.dumps_csv().splitlines()
    assert header.split(",") == list(TrainReport.CSV_FIELDS)
    assert row.split(",")[1] == "2"


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(norm="l2")
    with pytest.raises(ValueError):
        AttackConfig(restarts=0)
    with pytest.raises(ValueError):
        AttackConfig(init="gaussian")


@pytest.mark.parametrize("decreasing", [True, False])
def test_calibration_hits_every_level(decreasing):
    base = 0.47
    curve = (lambda s: base * (1 - s)) if decreasing else (lambda s: base * s)
    targets = [base / h for h in (1.1, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0)]
    for res in calibrate_kind(curve, targets, 0.0, 1.0, tolerance=0.005):
        assert res.reachable and abs(res.achieved - res.target) <= 0.005
        assert res.iterations < 20


def test_calibration_unreachable_target():
    res = calibrate_strength(lambda s: 0.4 + 0.1 * s, 0.2, 0.0, 1.0)
    assert not res.reachable and res.strength is None


def test_calibration_integer_strengths():
    calls = []

    def curve(s):
        calls.append(s)
        return 0.5 - 0.04 * s

    res = calibrate_strength(curve, 0.3, 0, 10, integer=True)
    assert res.strength == 5 and res.reachable
    assert all(float(s).is_integer() for s in calls)


def test_calibrate_kind_caches_evaluations():
    calls = []

    def curve(s):
        calls.append(s)
        return 1 - s

    calibrate_kind(curve, [0.9, 0.5, 0.1], 0.0, 1.0)
    assert len(calls) == len(set(calls))
