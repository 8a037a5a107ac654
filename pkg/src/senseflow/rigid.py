"""Rigid-background scene-flow refinement.

Static pixels are picked from semantic labels, the camera ego-motion is
fitted to the raw flow by Huber-reweighted Gauss-Newton over SE(3), and the
resulting rigid flow and disparity replace the raw estimates inside the
static region.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .core import DegenerateGeometryError, RigidTransform, StereoCamera, se3_compose
from .warp import WarpResult, inverse_warp_disparity_via_flow, inverse_warp_flow, rigid_flow

# CityScapes train ids for sky, person, rider, car, truck, bus, train, motorcycle, bicycle
CITYSCAPES_DYNAMIC_IDS = frozenset({10, 11, 12, 13, 14, 15, 16, 17, 18})
MAX_CONDITION = 1e12


@dataclass
class GnOptions:
    max_iters: int = 20
    residual_tol: float = 1e-6
    huber_delta: float = 1.345  # px; math.inf gives plain least squares
    damping: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.residual_tol > 0 and self.huber_delta > 0):
            raise ValueError("residual_tol and huber_delta must be positive")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")


@dataclass
class GnTrace:
    energies: list = field(default_factory=list)  # robust cost before each update
    mean_residuals: list = field(default_factory=list)  # mean sqrt(w)|r| in px
    step_norms: list = field(default_factory=list)
    conditions: list = field(default_factory=list)
    num_pixels: int = 0
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.step_norms)

    def records(self) -> list[dict]:
        out = []
        for i, (e, m) in enumerate(zip(self.energies, self.mean_residuals)):
            rec = {"iter": i, "energy": e, "mean_residual": m}
            if i < len(self.step_norms):
                rec["step_norm"] = self.step_norms[i]
                rec["condition"] = self.conditions[i]
            out.append(rec)
        return out


def build_rigid_mask(labels, dynamic_ids=CITYSCAPES_DYNAMIC_IDS, erosion: int = 10) -> np.ndarray:
    """1 where the label is static, eroded by a ``erosion`` x ``erosion`` square.

    Pixels beyond the image border count as static, so the frame edge does
    not erode the mask.
    """
    labels = np.asarray(labels)
    if labels.dtype.kind == "f" and not np.all(labels == np.round(labels)):
        raise ValueError("labels must be integral")
    static = ~np.isin(labels.astype(np.int64), list(dynamic_ids))
    if erosion > 1:
        static = ndimage.binary_erosion(static, structure=np.ones((erosion, erosion), bool), border_value=1)
    return static.astype(np.float64)


def _jacobian_rows(p_u, p_v, p_d, cam: StereoCamera):
    """Rows of the per-pixel Jacobian as two contiguous ``(6, N)`` arrays (u row, v row)."""
    fx, fy = cam.fx, cam.fy
    n = p_u.shape[0]
    Ju = np.empty((6, n))
    Jv = np.empty((6, n))
    uv = p_u * p_v
    Ju[0] = -uv * fx
    Ju[1] = (1.0 + p_u * p_u) * fx
    Ju[2] = -p_v * fx
    Ju[3] = p_d * fx
    Ju[4] = 0.0
    Ju[5] = -p_u * p_d * fx
    Jv[0] = -(1.0 + p_v * p_v) * fy
    Jv[1] = uv * fy
    Jv[2] = p_u * fy
    Jv[3] = 0.0
    Jv[4] = p_d * fy
    # d(y/z)/dt_z = -(y/z)(1/z), so this entry scales with p_v
    Jv[5] = -p_v * p_d * fy
    return Ju, Jv


def gn_jacobian(p_u, p_v, p_d, cam: StereoCamera) -> np.ndarray:
    """Derivative of the projected pixel w.r.t. a rotation-first twist applied to the point.

    ``p_u, p_v`` are normalized image coordinates ``((x - cx)/fx, (y - cy)/fy)``
    and ``p_d`` the inverse depth. Broadcasts; returns shape ``(..., 2, 6)``.
    """
    p_u, p_v, p_d = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (p_u, p_v, p_d)))
    if np.any(p_d <= 0):
        raise ValueError("inverse depth must be positive")
    shape = p_u.shape
    Ju, Jv = _jacobian_rows(p_u.ravel(), p_v.ravel(), p_d.ravel(), cam)
    return np.stack([Ju.T, Jv.T], axis=1).reshape(shape + (2, 6))


def huber_weights(norms: np.ndarray, delta: float) -> np.ndarray:
    return np.where(norms <= delta, 1.0, delta / np.maximum(norms, 1e-300))


def huber_cost(norms: np.ndarray, delta: float) -> np.ndarray:
    c = np.minimum(norms, delta)
    return c * (norms - 0.5 * c)


def _normal_equations_numpy(xs, ys, P, fu, fv, R, t, cam: StereoCamera, delta: float):
    """Huber-weighted ``(H, g, energy, sum sqrt(w)|r|)`` at ``(R, t)`` in the left-perturbation frame.

    ``P`` holds the frame-1 points as a ``(3, N)`` array.
    """
    q = R @ P + t[:, None]
    front = q[2] > 0
    inv_z = 1.0 / np.where(front, q[2], 1.0)
    pu, pv = q[0] * inv_z, q[1] * inv_z
    ru = fu - (cam.fx * pu + cam.cx - xs)
    rv = fv - (cam.fy * pv + cam.cy - ys)
    norms = np.sqrt(ru * ru + rv * rv)
    c = np.minimum(norms, delta) * front
    w = np.divide(c, norms, out=front.astype(np.float64), where=norms > 0)
    Ju, Jv = _jacobian_rows(pu, pv, inv_z, cam)
    H = (Ju * w) @ Ju.T + (Jv * w) @ Jv.T
    g = Ju @ (w * ru) + Jv @ (w * rv)
    return H, g, float(np.sum(c * (norms - 0.5 * c))), float(np.sum(np.sqrt(c * norms)))


try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

if njit is not None:
    @njit(cache=True)
    def _accumulate(xs, ys, P, fu, fv, R, t, fx, fy, cx, cy, delta):
        # one fused pass; unrolled scalar accumulators keep it register-bound
        h00 = h01 = h02 = h03 = h04 = h05 = h11 = h12 = h13 = h14 = h15 = 0.0
        h22 = h23 = h24 = h25 = h33 = h35 = h44 = h45 = h55 = 0.0
        g0 = g1 = g2 = g3 = g4 = g5 = 0.0
        energy = 0.0
        csum = 0.0
        r00, r01, r02 = R[0, 0], R[0, 1], R[0, 2]
        r10, r11, r12 = R[1, 0], R[1, 1], R[1, 2]
        r20, r21, r22 = R[2, 0], R[2, 1], R[2, 2]
        t0, t1, t2 = t[0], t[1], t[2]
        for i in range(xs.shape[0]):
            px = P[0, i]
            py = P[1, i]
            z = P[2, i]
            qz = r20 * px + r21 * py + r22 * z + t2
            if qz <= 0.0:
                continue
            qx = r00 * px + r01 * py + r02 * z + t0
            qy = r10 * px + r11 * py + r12 * z + t1
            iz = 1.0 / qz
            u = qx * iz
            v = qy * iz
            ru = fu[i] - (fx * u + cx - xs[i])
            rv = fv[i] - (fy * v + cy - ys[i])
            n = np.sqrt(ru * ru + rv * rv)
            c = min(n, delta)
            energy += c * (n - 0.5 * c)
            csum += np.sqrt(c * n)
            w = c / n if n > 0.0 else 1.0
            uv = u * v
            a0 = -uv * fx
            a1 = (1.0 + u * u) * fx
            a2 = -v * fx
            a3 = iz * fx
            a5 = -u * iz * fx
            b0 = -(1.0 + v * v) * fy
            b1 = uv * fy
            b2 = u * fy
            b4 = iz * fy
            b5 = -v * iz * fy
            h00 += w * (a0 * a0 + b0 * b0)
            h01 += w * (a0 * a1 + b0 * b1)
            h02 += w * (a0 * a2 + b0 * b2)
            h03 += w * (a0 * a3)
            h04 += w * (b0 * b4)
            h05 += w * (a0 * a5 + b0 * b5)
            h11 += w * (a1 * a1 + b1 * b1)
            h12 += w * (a1 * a2 + b1 * b2)
            h13 += w * (a1 * a3)
            h14 += w * (b1 * b4)
            h15 += w * (a1 * a5 + b1 * b5)
            h22 += w * (a2 * a2 + b2 * b2)
            h23 += w * (a2 * a3)
            h24 += w * (b2 * b4)
            h25 += w * (a2 * a5 + b2 * b5)
            h33 += w * (a3 * a3)
            h35 += w * (a3 * a5)
            h44 += w * (b4 * b4)
            h45 += w * (b4 * b5)
            h55 += w * (a5 * a5 + b5 * b5)
            g0 += w * (a0 * ru + b0 * rv)
            g1 += w * (a1 * ru + b1 * rv)
            g2 += w * (a2 * ru + b2 * rv)
            g3 += w * (a3 * ru)
            g4 += w * (b4 * rv)
            g5 += w * (a5 * ru + b5 * rv)
        H = np.array([
            [h00, h01, h02, h03, h04, h05],
            [h01, h11, h12, h13, h14, h15],
            [h02, h12, h22, h23, h24, h25],
            [h03, h13, h23, h33, 0.0, h35],
            [h04, h14, h24, 0.0, h44, h45],
            [h05, h15, h25, h35, h45, h55],
        ])
        return H, np.array([g0, g1, g2, g3, g4, g5]), energy, csum


def _normal_equations(xs, ys, P, fu, fv, R, t, cam: StereoCamera, delta: float):
    if njit is None:
        return _normal_equations_numpy(xs, ys, P, fu, fv, R, t, cam, delta)
    return _accumulate(xs, ys, P, fu, fv, np.ascontiguousarray(R), np.ascontiguousarray(t),
                       cam.fx, cam.fy, cam.cx, cam.cy, float(delta))


def gn_solve(flow, disp, mask, cam: StereoCamera, opts: Optional[GnOptions] = None):
    """Fit the ego-motion whose rigid flow best explains ``flow`` on ``mask``.

    Starts from identity and iterates Huber-weighted Gauss-Newton with right
    composition, stopping once the mean IRLS-weighted residual
    ``sqrt(w)|r|``, or its change between iterations, drops to
    ``residual_tol``.  Unlike the clipped residual ``w|r|`` this does not
    saturate at the Huber threshold while every pixel is still far off.
    Returns ``(RigidTransform, GnTrace)``.
    """
    opts = opts or GnOptions()
    flow = np.asarray(flow, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    h, w = disp.shape
    sel = (np.asarray(mask) > 0) & (disp > 0) & np.isfinite(flow).all(axis=-1)
    sel &= np.isfinite(disp)
    idx = np.flatnonzero(sel)
    n = idx.size
    if n < 6:
        raise ValueError(f"need at least 6 usable pixels, got {n}")
    xs = (idx % w).astype(np.float64)
    ys = (idx // w).astype(np.float64)
    z = cam.fb / disp.ravel()[idx]
    P = np.stack([(xs - cam.cx) / cam.fx * z, (ys - cam.cy) / cam.fy * z, z])
    flat = flow.reshape(-1, 2)
    fu = flat[idx, 0].copy()
    fv = flat[idx, 1].copy()

    xi = RigidTransform.identity()
    trace = GnTrace(num_pixels=n)
    prev = None
    for _ in range(opts.max_iters):
        H, g, energy, csum = _normal_equations(xs, ys, P, fu, fv, xi.rotation, xi.translation,
                                               cam, opts.huber_delta)
        mean_res = csum / n
        trace.energies.append(energy)
        trace.mean_residuals.append(mean_res)
        if mean_res <= opts.residual_tol or (prev is not None and abs(prev - mean_res) <= opts.residual_tol):
            trace.converged = True
            break
        prev = mean_res

        # right composition: J = J_point(xi p) @ Ad(xi)
        Ad = xi.adjoint()
        H = Ad.T @ H @ Ad
        g = Ad.T @ g
        eig = np.linalg.eigvalsh(H)
        cond = eig[-1] / eig[0] if eig[0] > 0 else math.inf
        trace.conditions.append(float(cond))
        if cond > MAX_CONDITION:
            raise DegenerateGeometryError(f"normal equations singular (condition {cond:.3g})")
        if opts.damping > 0:
            H = H + opts.damping * np.diag(np.diag(H))
        step = np.linalg.solve(H, g)
        trace.step_norms.append(float(np.linalg.norm(step)))
        xi = se3_compose(xi, step)
    return xi, trace


def compose_flow(raw, rigid, B) -> np.ndarray:
    """Rigid flow inside ``B``, raw flow elsewhere."""
    raw = np.asarray(raw, dtype=np.float64)
    rigid = np.asarray(rigid, dtype=np.float64)
    B = np.asarray(B)
    if raw.shape != rigid.shape or raw.shape[:2] != B.shape:
        raise ValueError("compose_flow: shape mismatch")
    return np.where(B[..., None] > 0, rigid, raw)


def compose_warped_disparity(d_inv: WarpResult, d_fwd, B) -> np.ndarray:
    """Rigid disparity inside ``B``, flow-warped disparity elsewhere.

    A pixel whose chosen source is invalid takes the other source; pixels
    invalid in both take the nearest pixel that ended up valid.
    """
    inv, inv_ok = np.asarray(d_inv.warped, dtype=np.float64), np.asarray(d_inv.inbounds) > 0
    fwd, fwd_ok = np.asarray(d_fwd[0], dtype=np.float64), np.asarray(d_fwd[1]) > 0
    B = np.asarray(B) > 0
    if not (inv.shape == fwd.shape == B.shape):
        raise ValueError("compose_warped_disparity: shape mismatch")
    out = np.where(B, fwd, inv)
    ok = np.where(B, fwd_ok, inv_ok)
    other, other_ok = np.where(B, inv, fwd), np.where(B, inv_ok, fwd_ok)
    take = ~ok & other_ok
    out = np.where(take, other, out)
    ok = ok | take
    if not ok.all() and ok.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~ok, return_indices=True)
        out = out[iy, ix]
    return out


class RefineResult(NamedTuple):
    flow: np.ndarray
    disparity2: np.ndarray  # second-frame disparity in frame-1 coordinates
    transform: Optional[RigidTransform]
    trace: Optional[GnTrace]
    mask: np.ndarray


def _flow_warped_disparity(flow, disp2) -> WarpResult:
    disp2 = np.asarray(disp2, dtype=np.float64)
    res = inverse_warp_disparity_via_flow(flow, disp2)
    src_valid = inverse_warp_flow((disp2 > 0).astype(np.float64), flow).warped
    # a sample touching an invalid tap is unreliable
    return WarpResult(res.warped, res.inbounds * (src_valid >= 1.0 - 1e-9))


def refine_scene_flow(flow, disp1, disp2, labels, cam: StereoCamera, opts: Optional[GnOptions] = None,
                      dynamic_ids=CITYSCAPES_DYNAMIC_IDS, erosion: int = 10) -> RefineResult:
    """Replace raw flow and second-frame disparity by their rigid counterparts on static background.

    With fewer than six usable static pixels nothing is fitted: the raw
    flow comes back unchanged with the flow-warped second-frame disparity and
    ``transform=None``.
    """
    flow = np.asarray(flow, dtype=np.float64)
    disp1 = np.asarray(disp1, dtype=np.float64)
    B = build_rigid_mask(labels, dynamic_ids, erosion)
    d_inv = _flow_warped_disparity(flow, disp2)
    usable = (B > 0) & (disp1 > 0)
    if usable.sum() < 6:
        empty = np.zeros_like(B)
        d2 = compose_warped_disparity(d_inv, (np.zeros_like(disp1), empty), empty)
        return RefineResult(flow.copy(), d2, None, None, empty)

    xi, trace = gn_solve(flow, disp1, B, cam, opts)
    rig = rigid_flow(xi, disp1, cam)
    B_eff = B * rig.valid
    refined = compose_flow(flow, rig.flow, B_eff)
    d2 = compose_warped_disparity(d_inv, (rig.disparity, rig.valid), B_eff)
    return RefineResult(refined, d2, xi, trace, B_eff)


def rotation_error(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic angle between the two rotations, radians."""
    R = a.rotation @ b.rotation.T
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, (np.trace(R) - 1.0) / 2.0))


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))
