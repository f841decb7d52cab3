import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latticeflow.data import CameraModel
from latticeflow.metrics import MetricReport, compute_metrics, parse_keyvalue, threshold_counts


def loop_metrics(pred, gt):
    """Straight per-point loop over the metric definitions."""
    n = len(gt)
    strict = relax = outliers = 0
    total = 0.0
    for p, g in zip(pred.tolist(), gt.tolist()):
        err = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)))
        norm = math.sqrt(sum(b * b for b in g))
        rel = err / norm if norm > 0 else math.inf
        total += err
        strict += err < 0.05 or rel < 0.05
        relax += err < 0.1 or rel < 0.1
        outliers += err > 0.3 or (norm > 0 and rel > 0.1)
    return total / n, strict, relax, outliers


def test_perfect_prediction(rng):
    gt = rng.normal(size=(100, 3))
    r = compute_metrics(gt.copy(), gt)
    assert r.epe3d == 0.0 and r.acc3d_strict == r.acc3d_relax == 1.0 and r.outliers3d == 0.0


def test_uniform_error_on_unit_flow():
    gt = np.tile([1.0, 0.0, 0.0], (50, 1))
    pred = gt + [0.0, 0.2, 0.0]
    r = compute_metrics(pred, gt)
    assert r.epe3d == pytest.approx(0.2)
    assert r.acc3d_strict == 0.0 and r.acc3d_relax == 0.0 and r.outliers3d == 1.0


def test_matches_loop_oracle(rng):
    gt = rng.normal(size=(1000, 3)) * rng.uniform(0, 1, (1000, 1))
    gt[:20] = 0.0
    pred = gt + rng.normal(size=gt.shape) * rng.choice([0.01, 0.05, 0.2, 1.0], (1000, 1))
    epe, strict, relax, outliers = loop_metrics(pred, gt)
    c = threshold_counts(pred, gt)
    assert (c["strict"], c["relax"], c["outliers"]) == (strict, relax, outliers)
    assert compute_metrics(pred, gt).epe3d == pytest.approx(epe, abs=1e-12)


def test_zero_flow_uses_absolute_thresholds():
    gt = np.zeros((3, 3))
    pred = np.array([[0.01, 0, 0], [0.07, 0, 0], [0.5, 0, 0]])
    c = threshold_counts(pred, gt)
    assert (c["strict"], c["relax"], c["outliers"]) == (1, 2, 1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (30, 3), elements=st.floats(-3, 3)), arrays(np.float64, (30, 3), elements=st.floats(-3, 3)))
def test_ratio_invariants(pred, gt):
    r = compute_metrics(pred, gt)
    assert 0 <= r.acc3d_strict <= r.acc3d_relax <= 1
    assert 0 <= r.outliers3d <= 1


def test_two_dimensional_metrics(rng):
    cam = CameraModel()
    pc1 = rng.uniform([-2, 0.5, 3], [2, 2, 8], (200, 3))
    gt = rng.normal(size=(200, 3)) * 0.1
    r = compute_metrics(gt, gt, pc1=pc1, camera=cam)
    assert r.epe2d == 0.0 and r.acc2d == 1.0
    # a shift along the viewing ray of the first point barely moves its pixel
    bad = gt + rng.normal(size=gt.shape)
    r2 = compute_metrics(bad, gt, pc1=pc1, camera=cam)
    assert r2.epe2d > 1.0 and r2.acc2d < 1.0
    with pytest.raises(ValueError):
        compute_metrics(gt, gt, camera=cam)


def test_acc2d_relative_branch():
    cam = CameraModel()
    pc1 = np.array([[0.0, 1.0, 5.0]])
    gt = np.array([[1.0, 0.0, 0.0]])  # 105 px of image motion
    pred = gt * 1.04  # about 4 px off, 4% relative
    r = compute_metrics(pred, gt, pc1=pc1, camera=cam)
    assert r.acc2d == 1.0


def test_report_validation_and_text():
    r = compute_metrics(np.ones((4, 3)), np.ones((4, 3)) * 1.01)
    back = parse_keyvalue(r.to_keyvalue())
    assert back["num_points"] == 4 and back["epe3d"] == pytest.approx(r.epe3d, abs=1e-6)
    assert "acc3d_strict" in r.to_table()
    with pytest.raises(ValueError):
        MetricReport(0.1, 0.9, 0.5, 0.0, 10)
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((0, 3)), np.zeros((0, 3)))
