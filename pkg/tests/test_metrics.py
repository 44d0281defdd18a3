import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarfield.metrics import (REPORT_COLUMNS, MetricsReport, chamfer, chamfer_brute_force, evaluate,
                                range_metrics, seg_metrics)
from lidarfield.types import LidarScan, ScanPattern, SensorPose


def scan_with(ranges, drop=None):
    r = np.asarray(ranges, float).reshape(1, -1)
    pat = ScanPattern(r.shape[1], (0.0,), 0.1, 200.0)
    s = LidarScan.empty(SensorPose.identity(), pat)
    s.first_range[:] = r
    s.first_intensity[:] = 0.5
    s.drop[:] = False if drop is None else np.asarray(drop).reshape(1, -1)
    return s


def test_range_metric_examples():
    g = scan_with(np.linspace(5, 20, 10))
    assert range_metrics(g, g) == (0.0, 0.0, 100.0)
    p = scan_with(np.linspace(5, 20, 10) + 0.3)
    mae, med, rec = range_metrics(p, g)
    assert mae == pytest.approx(30.0) and med == pytest.approx(30.0) and rec == 100.0
    p = scan_with(np.linspace(5, 20, 10) + np.r_[np.ones(5), np.zeros(5)])
    _, med, rec = range_metrics(p, g)
    assert rec == 50.0 and med == pytest.approx(50.0)


def test_range_metrics_mask_and_errors():
    g = scan_with([10, 10, 10], drop=[False, True, False])
    p = scan_with([10, 99, 11])
    assert range_metrics(p, g)[0] == pytest.approx(50.0)
    with pytest.raises(ValueError):
        range_metrics(scan_with([1, 2], drop=[True, True]), scan_with([1, 2]))
    with pytest.raises(ValueError):
        range_metrics(scan_with([1, 2]), scan_with([1, 2, 3]))


def test_recall_non_increasing_with_bias():
    g = scan_with(np.linspace(5, 20, 50))
    rng = np.random.default_rng(0)
    noise = rng.normal(0, 0.2, 50)
    recs = [range_metrics(scan_with(g.first_range.ravel() + noise + b), g)[2] for b in np.linspace(0.5, 2, 16)]
    assert all(b <= a for a, b in zip(recs, recs[1:]))


def test_chamfer_examples(rng):
    a = rng.normal(size=(50, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer([[0, 0, 0]], [[0.1, 0, 0]]) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), a)


@given(st.integers(0, 2 ** 31))
def test_chamfer_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(80, 3)) + 0.3
    assert abs(chamfer(a, b) - chamfer_brute_force(a, b)) <= 1e-9
    assert chamfer(a, b) == chamfer(b, a)
    assert chamfer(2.0 * a, 2.0 * b) == pytest.approx(2.0 * chamfer(a, b), rel=1e-12)


def test_seg_examples():
    g = np.array([1, 1, 0, 0], bool)
    assert seg_metrics(g, g) == (100.0, 100.0, 100.0)
    assert seg_metrics(np.ones(4, bool), g) == (100.0, 50.0, 50.0)
    assert seg_metrics(np.zeros(4, bool), g) == (0.0, None, 0.0)
    assert seg_metrics(np.zeros(4, bool), np.zeros(4, bool))[0] is None


def test_report_round_trip():
    g = scan_with(np.linspace(5, 20, 10), drop=[False] * 9 + [True])
    p = scan_with(np.linspace(5, 20, 10) + 0.1)
    rep = evaluate([p], [g])
    assert rep.n_scans == 1 and rep.n_rays == 10
    assert rep.second_seg_recall is None  # no dual returns anywhere
    assert MetricsReport.from_json(rep.to_json()) == rep
    head, row = rep.to_csv("wall").strip().split("\n")
    assert head.split(",")[1:] == list(REPORT_COLUMNS)
    values = dict(zip(REPORT_COLUMNS, row.split(",")[1:]))
    assert float(values["range_mae_cm"]) == pytest.approx(rep.range_mae_cm, rel=1e-5)
    assert values["second_seg_recall"] == ""
    for k in ("range_recall50", "drop_recall", "drop_precision", "drop_iou"):
        v = getattr(rep, k)
        assert v is None or 0.0 <= v <= 100.0
