import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from canopyseg import evaluation as E
from canopyseg.dataset import CoverageCategory as C
from canopyseg.errors import ArgumentError, DataError, DegenerateError, ShapeError

from oracles import bucket_loop, confusion_loop, required_hits_loop

FULL = (64, 64)


def test_uniform_cases(backend):
    assert E.pixel_confusion(np.full(FULL, 0.9), np.ones(FULL), 0.85) == E.ConfusionCounts(4096, 0, 0, 0)
    assert E.pixel_confusion(np.full(FULL, 0.9), np.zeros(FULL), 0.85) == E.ConfusionCounts(0, 4096, 0, 0)


def test_threshold_is_inclusive(backend):
    c = E.pixel_confusion(np.array([[0.85, 0.8499999]]), np.array([[1, 1]]), 0.85)
    assert (c.tp, c.fn) == (1, 1)


def test_confusion_errors():
    with pytest.raises(ShapeError):
        E.pixel_confusion(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ArgumentError):
            E.pixel_confusion(np.zeros((2, 2)), np.zeros((2, 2)), bad)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, (8, 8), elements=st.floats(0, 1, width=32)),
       hnp.arrays(np.uint8, (8, 8), elements=st.integers(0, 1)),
       st.sampled_from(E.DEFAULT_GRID))
def test_confusion_matches_loop(pred, target, thr):
    c = E.pixel_confusion(pred, target, thr)
    assert (c.tp, c.fp, c.tn, c.fn) == confusion_loop(pred, target, thr)
    assert c.total == 64


def test_rates():
    assert E.tp_rate(E.ConfusionCounts(tp=62, fn=38)) == 0.62
    assert E.tn_rate(E.ConfusionCounts(tn=981, fp=19)) == 0.981
    with pytest.raises(DegenerateError):
        E.tp_rate(E.ConfusionCounts(tn=5))
    with pytest.raises(DegenerateError):
        E.tn_rate(E.ConfusionCounts(tp=5))


def test_calibration_perfect_separator():
    t = np.zeros(FULL, np.uint8)
    t[:20] = 1
    p = np.where(t == 1, 0.99, 0.01)
    rep = E.calibrate_from_predictions([p], [t])
    assert all(r.youden_j == 1.0 for r in rep.grid)
    assert rep.chosen_threshold == 0.05


def test_calibration_constant_half():
    t = np.zeros(FULL, np.uint8)
    t[:10] = 1
    rep = E.calibrate_from_predictions([np.full(FULL, 0.5)], [t])
    assert all(r.youden_j == 0.0 for r in rep.grid)
    assert rep.chosen_threshold == 0.05
    assert [r.threshold for r in rep.grid] == sorted(E.DEFAULT_GRID)
    assert E.DEFAULT_GRID[0] == 0.05 and E.DEFAULT_GRID[-1] == 0.95 and len(E.DEFAULT_GRID) == 19


def test_calibration_picks_interior_optimum():
    t = np.zeros(FULL, np.uint8)
    t[:32] = 1
    p = np.where(t == 1, 0.7, 0.3).astype(np.float32)
    rep = E.calibrate_from_predictions([p], [t])
    assert rep.chosen_threshold == 0.35
    assert "<" in rep.to_text().splitlines()[7]


def test_calibration_empty():
    with pytest.raises(DataError):
        E.calibrate_from_predictions([], [])


def test_required_hits():
    for cov in range(1, 5000):
        assert E.required_hits(cov) == required_hits_loop(cov)


def test_bucket_rules():
    t = np.zeros(FULL, np.uint8)
    t.reshape(-1)[:100] = 1
    p = np.zeros(FULL)
    p.reshape(-1)[:10] = 1
    assert E.patch_detected(p, t, 0.85)
    p.reshape(-1)[9] = 0
    assert not E.patch_detected(p, t, 0.85)
    z = np.zeros(FULL, np.uint8)
    assert E.patch_detected(np.zeros(FULL), z, 0.85)
    fp = np.zeros(FULL)
    fp.reshape(-1)[:40] = 1
    assert E.patch_detected(fp, z, 0.85)
    fp.reshape(-1)[40] = 1
    assert not E.patch_detected(fp, z, 0.85)


def test_bucket_report_partitions(rng):
    targets, preds = [], []
    for cov in (0, 0, 5, 900, 2500, 4000, 4096):
        t = np.zeros(4096, np.uint8)
        t[:cov] = 1
        targets.append(t.reshape(FULL))
        preds.append(rng.random(FULL))
    rep = E.bucket_detection(targets, preds, 0.5)
    assert rep.total == 7
    assert [rep.rows[c].count for c in (C.C0, C.C1_20, C.C21_50, C.C51_80, C.C81_100)] == [2, 1, 1, 1, 2]
    assert all(0 <= r.rate <= 1 for r in rep.rows.values())
    assert "n/a" not in rep.to_text()
    with pytest.raises(DataError):
        E.bucket_detection([], [])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 0.85]))
def test_bucket_matches_loop(n, seed, thr):
    rng = np.random.default_rng(seed)
    targets = [(rng.random((16, 16)) < rng.choice([0, 0.05, 0.3, 0.7, 1.0])).astype(np.uint8) for _ in range(n)]
    preds = [rng.random((16, 16)).astype(np.float32) for _ in range(n)]
    rep = E.bucket_detection(targets, preds, thr)
    got = {c.value: (r.count, r.detected) for c, r in rep.rows.items()}
    assert got == bucket_loop(targets, preds, thr)


def test_overlay_examples():
    img = np.full((4, 4, 3), 100, np.uint8)
    np.testing.assert_array_equal(E.overlay(img, np.zeros((4, 4))), img)
    allpos = E.overlay(img, np.ones((4, 4)))
    assert (allpos == [177, 50, 50]).all()
    one = np.zeros((4, 4))
    one[2, 1] = 0.9
    changed = (E.overlay(img, one) != img).any(axis=2)
    assert changed.sum() == 1 and changed[2, 1]
    valid = np.ones((4, 4), bool)
    valid[2, 1] = False
    np.testing.assert_array_equal(E.overlay(img, one, valid=valid), img)
    with pytest.raises(ShapeError):
        E.overlay(img, np.zeros((3, 4)))


def test_report_serialization(rng):
    t = (rng.random(FULL) < 0.2).astype(np.uint8)
    p = rng.random(FULL)
    rep = E.EvalReport(0.85, E.pooled_confusion([p], [t], 0.85), E.bucket_detection([t], [p], 0.85), "default")
    d = rep.to_dict()
    assert d["threshold_source"] == "default" and sum(d["pixels"].values()) == 4096
    assert rep.to_json() == rep.to_json()
    assert "True Positive" in rep.to_text() and "n/a" in rep.to_text()
