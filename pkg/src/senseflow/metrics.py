"""KITTI-style flow, disparity and scene-flow error metrics.

A pixel is an outlier when its end-point error exceeds both 3 px and 5% of
the ground-truth magnitude.  Only pixels with validity 1 are evaluated.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

ABS_THRESH = 3.0
REL_THRESH = 0.05


@dataclass
class MetricReport:
    name: str
    epe: float
    outlier_rate: float
    count: int
    valid_count: int
    epe_bg: Optional[float] = None
    outlier_rate_bg: Optional[float] = None
    count_bg: Optional[int] = None
    epe_fg: Optional[float] = None
    outlier_rate_fg: Optional[float] = None
    count_fg: Optional[int] = None

    COLUMNS = ("name", "epe", "outlier_rate", "count", "valid_count", "epe_bg", "outlier_rate_bg",
               "count_bg", "epe_fg", "outlier_rate_fg", "count_fg")

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.COLUMNS)

    def csv_row(self) -> str:
        d = asdict(self)
        return ",".join("" if d[c] is None else str(d[c]) for c in self.COLUMNS)


def _valid(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    return np.asarray(valid) > 0


def _mean(values: np.ndarray, mask: np.ndarray) -> float:
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels to evaluate")
    return math.fsum(values[mask].ravel()) / n


def flow_error(pred, gt) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.hypot(d[..., 0], d[..., 1])


def flow_outliers(pred, gt) -> np.ndarray:
    """Per-pixel outlier flags for flow."""
    err = flow_error(pred, gt)
    g = np.asarray(gt, dtype=np.float64)
    mag = np.hypot(g[..., 0], g[..., 1])
    return (err > ABS_THRESH) & (err > REL_THRESH * mag)


def disparity_outliers(pred, gt) -> np.ndarray:
    g = np.asarray(gt, dtype=np.float64)
    err = np.abs(np.asarray(pred, dtype=np.float64) - g)
    return (err > ABS_THRESH) & (err > REL_THRESH * np.abs(g))


def flow_epe(pred, gt, valid=None) -> float:
    err = flow_error(pred, gt)
    return _mean(err, _valid(valid, err.shape))


def flow_outlier_rate(pred, gt, valid=None) -> float:
    out = flow_outliers(pred, gt)
    return _mean(out.astype(np.float64), _valid(valid, out.shape))


def disparity_epe(pred, gt, valid=None) -> float:
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    return _mean(err, _valid(valid, err.shape))


def disparity_outlier_rate(pred, gt, valid=None) -> float:
    out = disparity_outliers(pred, gt)
    return _mean(out.astype(np.float64), _valid(valid, out.shape))


def scene_flow_outliers(d1_flags, d2_flags, fl_flags) -> np.ndarray:
    return (np.asarray(d1_flags) > 0) | (np.asarray(d2_flags) > 0) | (np.asarray(fl_flags) > 0)


def scene_flow_outlier_rate(d1_flags, d2_flags, fl_flags, valid=None) -> float:
    """Fraction of valid pixels that are outliers in any of D1, D2 or Fl."""
    union = scene_flow_outliers(d1_flags, d2_flags, fl_flags)
    return _mean(union.astype(np.float64), _valid(valid, union.shape))


def _report(name, err, flags, valid, fg_mask) -> MetricReport:
    rep = MetricReport(name, _mean(err, valid), _mean(flags.astype(np.float64), valid),
                       int(valid.sum()), int(valid.sum()))
    if fg_mask is not None:
        fg = np.asarray(fg_mask) > 0
        for tag, region in (("bg", valid & ~fg), ("fg", valid & fg)):
            n = int(region.sum())
            setattr(rep, f"count_{tag}", n)
            if n:
                setattr(rep, f"epe_{tag}", _mean(err, region))
                setattr(rep, f"outlier_rate_{tag}", _mean(flags.astype(np.float64), region))
    return rep


def evaluate_flow(pred, gt, valid=None, fg_mask=None, name: str = "Fl") -> MetricReport:
    err = flow_error(pred, gt)
    return _report(name, err, flow_outliers(pred, gt), _valid(valid, err.shape), fg_mask)


def evaluate_disparity(pred, gt, valid=None, fg_mask=None, name: str = "D1") -> MetricReport:
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    return _report(name, err, disparity_outliers(pred, gt), _valid(valid, err.shape), fg_mask)


def evaluate_scene_flow(d1, d2, flow, valid=None, fg_mask=None) -> list[MetricReport]:
    """``d1``, ``d2``, ``flow`` are ``(pred, gt)`` pairs; returns D1, D2, Fl and SF reports."""
    shape = np.shape(d1[1])
    v = _valid(valid, shape)
    r1 = evaluate_disparity(*d1, v, fg_mask, "D1")
    r2 = evaluate_disparity(*d2, v, fg_mask, "D2")
    rf = evaluate_flow(*flow, v, fg_mask, "Fl")
    flags = scene_flow_outliers(disparity_outliers(*d1), disparity_outliers(*d2), flow_outliers(*flow))
    # scene-flow EPE is not defined by KITTI; report the flow EPE alongside the union rate
    rsf = _report("SF", flow_error(*flow), flags, v, fg_mask)
    return [r1, r2, rf, rsf]
