import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import is_outlier
from senseflow.metrics import (MetricReport, disparity_epe, disparity_outlier_rate, disparity_outliers,
                               evaluate_flow, evaluate_scene_flow, flow_epe, flow_outlier_rate, flow_outliers,
                               scene_flow_outlier_rate)

# (gt magnitude, error, outlier?) around both thresholds
TRUTH = [
    (10.0, 2.9, False),   # under 3 px
    (10.0, 3.0, False),   # exactly 3 px is not an outlier
    (10.0, 3.1, True),    # over 3 px and over 5 %
    (100.0, 4.9, False),  # over 3 px but under 5 % of 100
    (100.0, 5.0, False),  # exactly 5 %
    (100.0, 5.1, True),
    (0.0, 3.5, True),
    (60.0, 3.05, True),   # 5 % of 60 is 3.0
]


@pytest.mark.parametrize("mag,err,expected", TRUTH)
def test_disparity_truth_table(mag, err, expected):
    assert bool(disparity_outliers(np.array([mag + err]), np.array([mag]))[0]) is expected
    assert is_outlier(err, mag) is expected


@pytest.mark.parametrize("mag,err,expected", TRUTH)
def test_flow_truth_table(mag, err, expected):
    # gt along x, error along y: |err| is the Euclidean error
    gt = np.array([[mag, 0.0]])
    pred = np.array([[mag, err]])
    assert bool(flow_outliers(pred, gt)[0]) is expected


def test_rates_count_valid_only():
    gt = np.zeros((1, 4))
    pred = np.array([[0.0, 10.0, 10.0, 0.0]])
    valid = np.array([[1, 1, 0, 0]])
    assert disparity_outlier_rate(pred, gt, valid) == 0.5
    assert disparity_epe(pred, gt, valid) == 5.0
    assert disparity_outlier_rate(pred, gt) == 0.5
    with pytest.raises(ValueError):
        disparity_epe(pred, gt, np.zeros((1, 4)))


def test_flow_epe_and_rate(rng):
    gt = rng.normal(size=(5, 6, 2)) * 20
    pred = gt + rng.normal(size=(5, 6, 2)) * 4
    err = np.hypot(*(pred - gt).transpose(2, 0, 1))
    mag = np.hypot(*gt.transpose(2, 0, 1))
    expect = np.mean([is_outlier(e, m) for e, m in zip(err.ravel(), mag.ravel())])
    assert flow_outlier_rate(pred, gt) == pytest.approx(expect)
    assert flow_epe(pred, gt) == pytest.approx(err.mean())


@given(st.integers(0, 2 ** 31))
def test_sf_at_least_max_component(seed):
    r = np.random.default_rng(seed)
    f1, f2, f3 = r.random((3, 8, 9)) < r.random(3)[:, None, None]
    valid = r.random((8, 9)) < 0.7
    if not valid.any():
        valid[0, 0] = True
    sf = scene_flow_outlier_rate(f1, f2, f3, valid)
    comps = [f[valid].mean() for f in (f1, f2, f3)]
    assert sf >= max(comps) - 1e-15
    assert sf <= min(1.0, sum(comps)) + 1e-15


def test_report_split_and_csv():
    gt = np.zeros((2, 2, 2))
    pred = np.zeros((2, 2, 2))
    pred[0, 0] = [10, 0]
    fg = np.array([[1, 0], [0, 0]])
    rep = evaluate_flow(pred, gt, None, fg)
    assert rep.outlier_rate == 0.25 and rep.outlier_rate_fg == 1.0 and rep.outlier_rate_bg == 0.0
    assert rep.count_bg == 3
    row = rep.csv_row().split(",")
    assert len(row) == len(MetricReport.COLUMNS) and row[0] == "Fl"


def test_evaluate_scene_flow_names():
    d = np.ones((3, 3))
    f = np.zeros((3, 3, 2))
    reps = evaluate_scene_flow((d, d), (d + 5, d), (f, f))
    assert [r.name for r in reps] == ["D1", "D2", "Fl", "SF"]
    assert reps[1].outlier_rate == 1.0 and reps[3].outlier_rate == 1.0 and reps[0].outlier_rate == 0.0
