"""Semi-supervised scene-flow losses.

Every pixel reduction is a plain sum unless ``LossWeights.normalize`` is
set, in which case per-pixel sums are divided by the number of pixels that
contributed.  Occlusion maps use 1 for fully occluded.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .core import build_masked_pyramid, build_pyramid, pixel_grid
from .warp import bilinear_sample, disparity_to_flow, inverse_warp_flow

EPS = 1e-7
TERMS = ("L_F", "L_D", "L_OF", "L_OD", "L_OFd", "L_ODd", "L_Sd", "L_PC", "L_SC", "L_SS", "L_REG")


@dataclass
class LossWeights:
    omega: tuple = (0.32, 0.08, 0.02, 0.01, 0.005)  # finest level first
    alpha_O: float = 0.05
    alpha_Sd: float = 1.0
    alpha_PC: float = 0.5
    alpha_SC: float = 0.5
    beta_F: float = 0.5
    beta_D: float = 0.5
    gamma_F: float = 0.01 * 320 * 768
    gamma_D: float = 0.005 * 320 * 768
    T: float = 1.0
    pretrain_disp_scale: float = 0.25
    flow_penalty: str = "l2_norm"  # or "l2_squared"
    teacher_sign: float = 1.0  # -1 softens the negated logits
    normalize: bool = False

    def __post_init__(self):
        self.omega = tuple(float(w) for w in self.omega)
        scalars = [self.alpha_O, self.alpha_Sd, self.alpha_PC, self.alpha_SC,
                   self.beta_F, self.beta_D, self.gamma_F, self.gamma_D, self.pretrain_disp_scale]
        if any(w < 0 for w in self.omega) or any(w < 0 for w in scalars):
            raise ValueError("loss weights must be nonnegative")
        if not self.T > 0:
            raise ValueError("temperature must be positive")
        if self.flow_penalty not in ("l2_norm", "l2_squared"):
            raise ValueError(f"unknown flow penalty {self.flow_penalty!r}")

    @classmethod
    def for_crop(cls, crop_h: int, crop_w: int, **kw) -> "LossWeights":
        """SSIM weights scale with the training crop area."""
        return cls(gamma_F=0.01 * crop_h * crop_w, gamma_D=0.005 * crop_h * crop_w, **kw)


@dataclass
class LossReport:
    """Loss terms that could be computed, with the coefficient each enters the total with."""

    terms: dict = field(default_factory=dict)
    coefficients: dict = field(default_factory=dict)

    def add(self, name: str, value: float, coefficient: float):
        self.terms[name] = float(value)
        self.coefficients[name] = float(coefficient)

    def __contains__(self, name):
        return name in self.terms

    def __getitem__(self, name):
        return self.terms[name]

    @property
    def total(self) -> float:
        return math.fsum(self.coefficients[k] * v for k, v in self.terms.items())

    def to_json(self) -> str:
        row = {k: self.terms.get(k) for k in TERMS}
        row["total"] = self.total
        return json.dumps(row)

    def to_csv(self) -> str:
        cells = ["" if k not in self.terms else repr(self.terms[k]) for k in TERMS]
        return ",".join(TERMS + ("total",)) + "\n" + ",".join(cells + [repr(self.total)]) + "\n"


def _reduce(per_pixel: np.ndarray, mask: np.ndarray, normalize: bool) -> float:
    m = mask > 0
    s = math.fsum(per_pixel[m].ravel())
    if normalize:
        n = int(m.sum())
        return s / n if n else 0.0
    return s


def smooth_l1(r) -> np.ndarray:
    r = np.abs(np.asarray(r, dtype=np.float64))
    return np.where(r < 1.0, 0.5 * r * r, r - 0.5)


def robust_penalty(residual, kind: str = "l2_norm") -> float:
    """Penalty of one residual vector."""
    r = np.asarray(residual, dtype=np.float64).ravel()
    if kind == "l2_norm":
        return float(np.sqrt(np.sum(r * r)))
    if kind == "l2_squared":
        return float(np.sum(r * r))
    if kind == "smooth_l1":
        return float(np.sum(smooth_l1(r)))
    raise ValueError(f"unknown penalty kind {kind!r}")


def _pixel_penalty(diff: np.ndarray, kind: str) -> np.ndarray:
    """Per-pixel penalty of a residual map, reducing over channels."""
    d = diff if diff.ndim == 3 else diff[..., None]
    if kind == "l2_norm":
        return np.sqrt(np.sum(d * d, axis=-1))
    if kind == "l2_squared":
        return np.sum(d * d, axis=-1)
    if kind == "smooth_l1":
        return np.sum(smooth_l1(d), axis=-1)
    raise ValueError(f"unknown penalty kind {kind!r}")


def _as_pyramid(pred) -> list:
    if isinstance(pred, np.ndarray):
        return [pred]
    return [np.asarray(p, dtype=np.float64) for p in pred]


def multiscale_task_loss(pred_pyramid, gt, valid, weights: LossWeights, kind: str,
                         scale_values: bool = True) -> float:
    """Level-weighted sum of per-pixel penalties against a pooled sparse ground truth.

    Ground truth and validity are pooled alongside the prediction pyramid;
    ``scale_values`` halves ground-truth values per level (flow, disparity).
    """
    preds = _as_pyramid(pred_pyramid)
    if len(preds) > len(weights.omega):
        raise ValueError(f"{len(preds)} levels but only {len(weights.omega)} level weights")
    gt = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.ones(gt.shape[:2])
    gts, masks = build_masked_pyramid(gt, valid, len(preds), scale_values)
    total, any_valid = [], False
    for i, (p, g, m) in enumerate(zip(preds, gts, masks)):
        if p.shape != g.shape:
            raise ValueError(f"level {i}: prediction {p.shape} vs ground truth {g.shape}")
        any_valid |= bool(np.any(m > 0))
        total.append(weights.omega[i] * _reduce(_pixel_penalty(p - g, kind), m, weights.normalize))
    if not any_valid:
        raise ValueError("no valid ground-truth pixels at any level")
    return math.fsum(total)


def occlusion_bce(pred, gt, valid=None, normalize: bool = False) -> float:
    """Binary cross entropy summed over valid pixels; predictions clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1.0 - EPS)
    g = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.ones(p.shape)
    bce = -(g * np.log(p) + (1.0 - g) * np.log1p(-p))
    return _reduce(bce, valid, normalize)


def multiscale_occlusion_bce(pred_pyramid, gt, valid, weights: LossWeights) -> float:
    preds = _as_pyramid(pred_pyramid)
    if valid is None:
        valid = np.ones(np.shape(gt))
    gts, masks = build_masked_pyramid(gt, valid, len(preds))
    return math.fsum(weights.omega[i] * occlusion_bce(p, g, m, weights.normalize)
                     for i, (p, g, m) in enumerate(zip(preds, gts, masks)))


def soften(logits, T: float = 1.0, sign: float = 1.0) -> np.ndarray:
    """Temperature-softened posterior over the last axis."""
    return softmax(sign * np.asarray(logits, dtype=np.float64) / T, axis=-1)


def seg_distillation(student_posterior, teacher_logits, T: float = 1.0, valid=None,
                     sign: float = 1.0, normalize: bool = False) -> float:
    """Cross entropy of the student posterior under the softened teacher, scaled by T."""
    y_hat = np.asarray(student_posterior, dtype=np.float64)
    z = np.asarray(teacher_logits, dtype=np.float64)
    if y_hat.shape != z.shape:
        raise ValueError(f"student {y_hat.shape} and teacher {z.shape} disagree")
    y_soft = soften(z, T, sign)
    per_pixel = -T * np.sum(y_soft * np.log(np.clip(y_hat, EPS, None)), axis=-1)
    if valid is None:
        valid = np.ones(per_pixel.shape)
    return _reduce(per_pixel, valid, normalize)


def occlusion_distillation(pred_pyramid, pseudo_gt, weights: LossWeights) -> float:
    """smooth_l1 between occlusion predictions and a pooled full-resolution pseudo ground truth."""
    preds = _as_pyramid(pred_pyramid)
    targets = build_pyramid(pseudo_gt, len(preds))
    total = []
    for i, (p, g) in enumerate(zip(preds, targets)):
        if p.shape != g.shape:
            raise ValueError(f"level {i}: prediction {p.shape} vs pseudo ground truth {g.shape}")
        total.append(weights.omega[i] * _reduce(smooth_l1(p - g), np.ones(g.shape[:2]), weights.normalize))
    return math.fsum(total)


def _field_flow(field, mode: str) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if mode == "flow":
        return field
    if mode == "disparity":
        return disparity_to_flow(field)
    raise ValueError(f"mode must be 'flow' or 'disparity', got {mode!r}")


def _consistency(ref, other, field, occ, mode: str, normalize: bool = False, grad: bool = False):
    ref = np.asarray(ref, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    flow = _field_flow(field, mode)
    occ = np.zeros(ref.shape[:2]) if occ is None else np.asarray(occ, dtype=np.float64)
    grid = pixel_grid(*flow.shape[:2])
    sx, sy = grid[..., 0] + flow[..., 0], grid[..., 1] + flow[..., 1]
    if not grad:
        warped, inb = bilinear_sample(other, sx, sy)
    else:
        warped, inb, dx, dy = bilinear_sample(other, sx, sy, with_grad=True)
    diff = ref - warped
    if diff.ndim == 2:
        diff = diff[..., None]
    l1 = np.sum(np.abs(diff), axis=-1)
    vis = (1.0 - occ) * inb
    value = _reduce(l1 * vis, inb, normalize)
    if not grad:
        return value
    # d|ref - w|/dw = -sign(ref - w); chain through the sample coordinate
    s = -np.sign(diff)
    if dx.ndim == 2:
        dx, dy = dx[..., None], dy[..., None]
    scale = vis
    if normalize:
        n = max(int((inb > 0).sum()), 1)
        scale = vis / n
    gu = np.sum(s * dx, axis=-1) * scale
    gv = np.sum(s * dy, axis=-1) * scale
    g_occ = -l1 * inb / (max(int((inb > 0).sum()), 1) if normalize else 1.0)
    if mode == "flow":
        g_field = np.stack([gu, gv], axis=-1)
    else:
        g_field = -gu
    return value, g_field, g_occ


def photometric_consistency(I_ref, I_other, field, occ, mode: str = "flow", normalize: bool = False) -> float:
    """Occlusion-modulated L1 between ``I_ref`` and ``I_other`` warped along ``field``.

    ``mode='disparity'`` treats ``field`` as a left-view disparity map and
    ``I_other`` as the right image.  Out-of-bounds samples are excluded.
    """
    return _consistency(I_ref, I_other, field, occ, mode, normalize)


def photometric_consistency_grad(I_ref, I_other, field, occ, mode: str = "flow", normalize: bool = False):
    """Value and analytic gradients with respect to ``field`` and ``occ``.

    The L1 kink at zero residual takes subgradient 0; clamped samples have
    zero coordinate gradient.
    """
    return _consistency(I_ref, I_other, field, occ, mode, normalize, grad=True)


def semantic_consistency(y_ref, y_other, field, occ, mode: str = "flow", normalize: bool = False) -> float:
    """Photometric consistency with segmentation posteriors as the payload."""
    return _consistency(y_ref, y_other, field, occ, mode, normalize)


def semantic_consistency_grad(y_ref, y_other, field, occ, mode: str = "flow", normalize: bool = False):
    return _consistency(y_ref, y_other, field, occ, mode, normalize, grad=True)


SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(m: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of an (H, W, C) map."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(m, k, axis=0)  # (H-k+1, W, C, k)
    m = rows @ g
    cols = np.lib.stride_tricks.sliding_window_view(m, k, axis=1)
    return cols @ g


def ssim_map(a, b, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] < size or a.shape[1] < size:
        raise ValueError(f"image {a.shape[:2]} smaller than the {size}x{size} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(size, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_scalar(a, b) -> float:
    """Mean SSIM over all full-window centres and channels (11x11 Gaussian, sigma 1.5)."""
    return float(np.mean(ssim_map(a, b)))


def _composite(ref, other, field, occ, mode):
    ref = np.asarray(ref, dtype=np.float64)
    warped = inverse_warp_flow(other, _field_flow(field, mode)).warped
    o = np.zeros(ref.shape[:2]) if occ is None else np.asarray(occ, dtype=np.float64)
    if warped.ndim == 3:
        o = o[..., None]
    return ref * o + warped * (1.0 - o)


def ssim_dissimilarity(ref, other, field, occ, mode: str) -> float:
    """``1 - SS(ref, composite)`` for one branch."""
    return 1.0 - ssim_scalar(ref, _composite(ref, other, field, occ, mode))


def ssim_loss(I1, I2, flow, occ_flow, I_l, I_r, disp, occ_disp, weights: LossWeights) -> float:
    """Structural-similarity loss; occluded warped pixels are replaced by the reference."""
    return (weights.gamma_D * ssim_dissimilarity(I_l, I_r, disp, occ_disp, "disparity")
            + weights.gamma_F * ssim_dissimilarity(I1, I2, flow, occ_flow, "flow"))


def occlusion_regularization(occ_flow, occ_disp, weights: LossWeights) -> float:
    """Penalise occlusion mass so the consistency terms cannot switch everything off."""
    total = 0.0
    if occ_disp is not None:
        total += weights.beta_D * math.fsum(np.asarray(occ_disp, dtype=np.float64).ravel())
    if occ_flow is not None:
        total += weights.beta_F * math.fsum(np.asarray(occ_flow, dtype=np.float64).ravel())
    return total


@dataclass
class LossInputs:
    """Maps available for one training sample. Anything left as None disables its terms.

    Predictions may be given as a single finest-level map or as a list of
    levels, finest first; self-supervised terms use the finest level.
    ``seg1``/``seg2``/``seg_right`` are teacher posteriors for frame 1 left,
    frame 2 left and frame 1 right.
    """

    flow: Optional[Sequence] = None
    disp: Optional[Sequence] = None
    occ_flow: Optional[Sequence] = None
    occ_disp: Optional[Sequence] = None
    flow_gt: Optional[np.ndarray] = None
    flow_valid: Optional[np.ndarray] = None
    disp_gt: Optional[np.ndarray] = None
    disp_valid: Optional[np.ndarray] = None
    occ_flow_gt: Optional[np.ndarray] = None
    occ_disp_gt: Optional[np.ndarray] = None
    occ_flow_pseudo: Optional[np.ndarray] = None
    occ_disp_pseudo: Optional[np.ndarray] = None
    seg_student: Optional[np.ndarray] = None
    seg_teacher_logits: Optional[np.ndarray] = None
    seg_valid: Optional[np.ndarray] = None
    image1: Optional[np.ndarray] = None
    image2: Optional[np.ndarray] = None
    image_right: Optional[np.ndarray] = None
    seg1: Optional[np.ndarray] = None
    seg2: Optional[np.ndarray] = None
    seg_right: Optional[np.ndarray] = None

    def finest(self, name: str):
        v = getattr(self, name)
        if v is None:
            return None
        return _as_pyramid(v)[0]

    def provided(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) is not None]


def _supervised_terms(x: LossInputs, w: LossWeights, report: LossReport, disp_coef: float, with_occ: bool):
    if x.flow is not None and x.flow_gt is not None:
        report.add("L_F", multiscale_task_loss(x.flow, x.flow_gt, x.flow_valid, w, w.flow_penalty), 1.0)
    if x.disp is not None and x.disp_gt is not None:
        report.add("L_D", multiscale_task_loss(x.disp, x.disp_gt, x.disp_valid, w, "smooth_l1"), disp_coef)
    if with_occ:
        if x.occ_flow is not None and x.occ_flow_gt is not None:
            report.add("L_OF", multiscale_occlusion_bce(x.occ_flow, x.occ_flow_gt, None, w), 1.0)
        if x.occ_disp is not None and x.occ_disp_gt is not None:
            report.add("L_OD", multiscale_occlusion_bce(x.occ_disp, x.occ_disp_gt, None, w), disp_coef)


def total_semi_supervised(x: LossInputs, weights: Optional[LossWeights] = None) -> LossReport:
    """Supervised + distillation + self-supervised loss with the fine-tuning coefficients."""
    w = weights or LossWeights()
    report = LossReport()
    _supervised_terms(x, w, report, 1.0, with_occ=False)

    if x.occ_flow is not None and x.occ_flow_pseudo is not None:
        report.add("L_OFd", occlusion_distillation(x.occ_flow, x.occ_flow_pseudo, w), w.alpha_O)
    if x.occ_disp is not None and x.occ_disp_pseudo is not None:
        report.add("L_ODd", occlusion_distillation(x.occ_disp, x.occ_disp_pseudo, w), w.alpha_O)
    if x.seg_student is not None and x.seg_teacher_logits is not None:
        report.add("L_Sd", seg_distillation(x.seg_student, x.seg_teacher_logits, w.T, x.seg_valid,
                                            w.teacher_sign, w.normalize), w.alpha_Sd)

    flow, disp = x.finest("flow"), x.finest("disp")
    occ_f, occ_d = x.finest("occ_flow"), x.finest("occ_disp")
    flow_branch = flow is not None and x.image1 is not None and x.image2 is not None
    disp_branch = disp is not None and x.image1 is not None and x.image_right is not None

    pc = []
    if disp_branch:
        pc.append(photometric_consistency(x.image1, x.image_right, disp, occ_d, "disparity", w.normalize))
    if flow_branch:
        pc.append(photometric_consistency(x.image1, x.image2, flow, occ_f, "flow", w.normalize))
    if pc:
        report.add("L_PC", math.fsum(pc), w.alpha_PC)

    sc = []
    if disp is not None and x.seg1 is not None and x.seg_right is not None:
        sc.append(semantic_consistency(x.seg1, x.seg_right, disp, occ_d, "disparity", w.normalize))
    if flow is not None and x.seg1 is not None and x.seg2 is not None:
        sc.append(semantic_consistency(x.seg1, x.seg2, flow, occ_f, "flow", w.normalize))
    if sc:
        report.add("L_SC", math.fsum(sc), w.alpha_SC)

    ss = []
    if disp_branch:
        ss.append(w.gamma_D * ssim_dissimilarity(x.image1, x.image_right, disp, occ_d, "disparity"))
    if flow_branch:
        ss.append(w.gamma_F * ssim_dissimilarity(x.image1, x.image2, flow, occ_f, "flow"))
    if ss:
        report.add("L_SS", math.fsum(ss), 1.0)

    if occ_f is not None or occ_d is not None:
        report.add("L_REG", occlusion_regularization(occ_f, occ_d, w), 1.0)

    if not report.terms:
        raise ValueError("no loss term is computable from the provided inputs")
    return report


def pretrain_supervised(x: LossInputs, weights: Optional[LossWeights] = None) -> LossReport:
    """Synthetic pre-training loss; the disparity branch is down-weighted.

    Occlusion terms are dropped when occlusion ground truth is absent.
    """
    w = weights or LossWeights()
    if x.flow_gt is None and x.disp_gt is None:
        raise ValueError("pre-training needs flow or disparity ground truth")
    report = LossReport()
    _supervised_terms(x, w, report, w.pretrain_disp_scale, with_occ=True)
    if not report.terms:
        raise ValueError("ground truth given without matching predictions")
    return report
