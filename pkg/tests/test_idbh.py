import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from augat.cli import synthetic_grid_score
from augat.idbh import (ColorShapeLayer, ConsecutiveDropPruning, DominancePruning, IdbhSchedule,
                        LayerEntry, NoPruning, RobustnessScore, SearchSpace, apply_idbh,
                        at_least_as_hard, color_biased, enumerate_search_space, grid_search,
                        harder, replay_idbh, sample_idbh, schedule_label, shape_biased,
                        spatial_variant, strength_diversity_sampler, type_diversity_pool,
                        write_results_csv)
from augat.imagecore import RngStream
from augat.transforms import Kind, default_calibration, hflip
from conftest import random_image

SCHEDULES = enumerate_search_space(SearchSpace())


def test_default_space_has_80_schedules():
    assert len(SCHEDULES) == len(SearchSpace()) == 80
    assert len({schedule_label(s) for s in SCHEDULES}) == 80


def test_space_roundtrip():
    space = SearchSpace()
    back = SearchSpace.from_dict(json.loads(json.dumps(space.to_dict())))
    assert enumerate_search_space(back) == SCHEDULES


def test_schedule_roundtrip(tmp_path):
    s = SCHEDULES[17]
    s.save(tmp_path / "s.json")
    assert IdbhSchedule.load(tmp_path / "s.json") == s
    with pytest.raises(ValueError):
        IdbhSchedule.from_dict({"flip": {}, "bogus": {}})


@pytest.mark.parametrize("kwargs", [{"p_flip": 1.5}, {"crop_range": (3, 2)},
                                    {"dropout_area": (0.0, 0.3)}])
def test_invalid_schedule(kwargs):
    with pytest.raises(ValueError):
        IdbhSchedule(**kwargs)


def test_crop_range_checked_against_image():
    with pytest.raises(ValueError):
        sample_idbh(IdbhSchedule(p_crop=1, crop_range=(0, 8)), (8, 8, 3), RngStream(0))


def test_all_zero_schedule_is_identity():
    img = random_image(0)
    s = IdbhSchedule(p_flip=0)
    for seed in range(20):
        out = apply_idbh(s, img, RngStream(seed))
        assert np.array_equal(out, img) and out is not img


def test_flip_only():
    img = random_image(1)
    assert np.array_equal(apply_idbh(IdbhSchedule(p_flip=1), img, RngStream(0)), hflip(img))


def test_layer_order_in_trace():
    s = IdbhSchedule(p_flip=1, p_crop=1, crop_range=(1, 4), p_color_shape=1, p_dropout=1)
    trace = sample_idbh(s, (16, 16, 3), RngStream(2))
    assert [t["layer"] for t in trace] == ["flip", "crop", "colorshape", "dropout"]
    json.dumps(trace)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 79), st.integers(0, 2**32))
def test_replay_reproduces_sampled_output(i, seed):
    img = random_image(seed % 50, 16, 16)
    s = SCHEDULES[i]
    trace = sample_idbh(s, img.shape, RngStream(seed))
    roundtrip = json.loads(json.dumps(trace))
    assert np.array_equal(replay_idbh(s, roundtrip, img), apply_idbh(s, img, RngStream(seed)))


def test_layer_frequencies_match_probabilities():
    s = IdbhSchedule(p_flip=0.5, p_crop=0.3, crop_range=(0, 4), p_color_shape=0.7, p_dropout=0.2)
    n = 4000
    counts = np.zeros(4)
    for k in range(n):
        trace = sample_idbh(s, (16, 16, 3), RngStream(9, k))
        counts += [t["applied"] for t in trace]
    for c, p in zip(counts, (0.5, 0.3, 0.7, 0.2)):
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(c - n * p) < 4 * sigma


def test_color_shape_selection_follows_weights():
    layer = color_biased()
    rng = RngStream(3)
    n = 9000
    idx = {e.kind: i for i, e in enumerate(layer.entries)}
    counts = np.zeros(len(layer.entries))
    for _ in range(n):
        kind, strength = layer.sample(rng)
        counts[idx[kind]] += 1
        e = layer.entries[idx[kind]]
        assert e.low <= strength <= e.high or e.kind in (Kind.EQUALIZE, Kind.AUTOCONTRAST)
    assert stats.chisquare(counts, layer.probabilities * n).pvalue > 0.001


def test_biased_layers_differ():
    c, s = color_biased(), shape_biased()
    colour = [i for i, e in enumerate(c.entries) if e.kind in (Kind.COLOR, Kind.CONTRAST)]
    assert c.probabilities[colour].sum() > s.probabilities[colour].sum()
    with pytest.raises(ValueError):
        ColorShapeLayer((LayerEntry(Kind.COLOR, 0.0, 0.5, 0.6),))


def test_hardness_order():
    a = IdbhSchedule(p_crop=0.5, crop_range=(0, 4))
    b = IdbhSchedule(p_crop=1.0, crop_range=(0, 8))
    assert harder(b, a) and not harder(a, b) and not harder(a, a)
    assert at_least_as_hard(a, a)
    c = IdbhSchedule(p_crop=1.0, crop_range=(0, 8), color_shape=shape_biased())
    assert not at_least_as_hard(c, a)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 79), st.integers(0, 79), st.integers(0, 79))
def test_hardness_is_a_strict_partial_order(i, j, k):
    a, b, c = SCHEDULES[i], SCHEDULES[j], SCHEDULES[k]
    assert not (harder(a, b) and harder(b, a))
    if harder(a, b) and harder(b, c):
        assert harder(a, c)


def test_dominated_schedules_come_after_their_dominators():
    pos = {schedule_label(s): i for i, s in enumerate(SCHEDULES)}
    for a in SCHEDULES:
        for b in SCHEDULES:
            if harder(a, b):
                assert pos[schedule_label(b)] < pos[schedule_label(a)]


def counting(evaluator):
    calls = []

    def wrapped(s):
        calls.append(schedule_label(s))
        return evaluator(s)
    return wrapped, calls


def test_grid_search_ranks_and_records(tmp_path):
    ev, calls = counting(synthetic_grid_score)
    results = grid_search(SearchSpace(), ev, NoPruning(), tmp_path / "p.jsonl")
    assert len(results) == 80 == len(calls)
    best = [r.score.best_robustness for r in results]
    assert best == sorted(best, reverse=True)
    write_results_csv(results, tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 81


def test_resume_never_reevaluates(tmp_path):
    progress = tmp_path / "p.jsonl"
    ev, first = counting(synthetic_grid_score)

    class Killed(BaseException):
        pass

    def dying(s):
        if len(first) == 30:
            raise Killed
        return ev(s)

    with pytest.raises(Killed):
        grid_search(SearchSpace(), dying, NoPruning(), progress)
    ev2, second = counting(synthetic_grid_score)
    results = grid_search(SearchSpace(), ev2, NoPruning(), progress)
    assert len(first) == 30 and len(second) == 50
    assert not set(first) & set(second)
    assert len(results) == 80


def test_failures_are_recorded_and_search_continues():
    def flaky(s):
        if s.p_dropout == 1.0:
            raise RuntimeError("boom")
        return synthetic_grid_score(s)
    results = grid_search(SearchSpace(), flaky)
    failed = [r for r in results if r.status == "failed"]
    assert len(failed) == 32 and all("boom" in r.reason for r in failed)
    assert results[0].status == "evaluated"


@pytest.mark.parametrize("policy", [DominancePruning(0.05), ConsecutiveDropPruning(2)])
def test_pruning_keeps_the_top_schedule(policy):
    full = grid_search(SearchSpace(), synthetic_grid_score, NoPruning())
    ev, calls = counting(synthetic_grid_score)
    pruned = grid_search(SearchSpace(), ev, policy)
    assert pruned[0].schedule_id == full[0].schedule_id
    assert len(calls) < 80
    skipped = [r for r in pruned if r.status == "skipped"]
    assert skipped and all(r.dominated_by for r in skipped)


def test_parallel_workers_match_serial():
    serial = grid_search(SearchSpace(), synthetic_grid_score)
    parallel = grid_search(SearchSpace(), synthetic_grid_score, workers=4)
    assert [r.schedule_id for r in serial] == [r.schedule_id for r in parallel]


def test_type_diversity_pool():
    table = default_calibration()
    kinds = ["ShearX", "Rotate", "Color", "Contrast"]
    sampler = type_diversity_pool(kinds, 2, 3, RngStream(0), table)
    assert len(sampler.specs) == len({s.kind for s in sampler.specs}) == 3
    assert type_diversity_pool(kinds, 2, 0, RngStream(0), table).specs == ()
    with pytest.raises(ValueError):
        type_diversity_pool(["Cropshift"], 2, 1, RngStream(0), table)
    counts = np.zeros(3)
    rng = RngStream(1)
    for _ in range(3000):
        counts[sampler.pick(rng)] += 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_strength_diversity_sampler():
    table = default_calibration()
    sampler = strength_diversity_sampler("ShearX", [3, 4, 5], table)
    rng = RngStream(2)
    seen = {sampler.sample_degree(rng) for _ in range(200)}
    assert seen == {3, 4, 5}
    assert sampler.specs[4].strength == table["ShearX"].strength(4)
    with pytest.raises(ValueError):
        strength_diversity_sampler("Cropshift-1", [1, 2], table)
    fixed = strength_diversity_sampler("Cropshift-1", [1, 2], table, RngStream(0), (32, 32, 3))
    assert all(s.params is not None for s in fixed.specs.values())


def test_spatial_variant_fixed_location():
    img = random_image(3, 16, 16)
    aug = spatial_variant("Cutout-i-1", 6, RngStream(0), img.shape)
    outs = [aug(img, RngStream(k)) for k in range(4)]
    assert all(np.array_equal(o, outs[0]) for o in outs)
    aug = spatial_variant("Cutout-i", 6, RngStream(0), img.shape)
    outs = [aug(img, RngStream(k)) for k in range(4)]
    assert not all(np.array_equal(o, outs[0]) for o in outs)
