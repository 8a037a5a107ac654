"""Dense warping: bilinear inverse warps, rigid flow and disparity splatting.

Disparity follows the KITTI sign convention (left pixel ``x`` matches right
pixel ``x - d``), so warping the right image by disparity is an inverse warp
with flow ``(-d, 0)``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import RigidTransform, StereoCamera, _project, pixel_grid


class WarpResult(NamedTuple):
    warped: np.ndarray
    inbounds: np.ndarray  # 1.0 where every tap with nonzero weight is inside the source


class RigidFlowResult(NamedTuple):
    flow: np.ndarray
    disparity: np.ndarray  # frame-2 disparity of each frame-1 pixel's point
    valid: np.ndarray


def _taps(x: np.ndarray, size: int):
    """Left tap index and fractional weight for clamp-to-edge bilinear sampling."""
    xc = np.clip(x, 0.0, size - 1.0)
    x0 = np.floor(xc)
    if size > 1:
        x0 = np.minimum(x0, size - 2)
    frac = xc - x0
    i0 = x0.astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, frac


def bilinear_sample(src: np.ndarray, x: np.ndarray, y: np.ndarray, with_grad: bool = False):
    """Sample ``src`` at continuous coordinates.

    Returns ``(values, inbounds)`` or, with ``with_grad``, additionally the
    partial derivatives of the sample with respect to ``x`` and ``y``.
    Derivatives are zero wherever the coordinate was clamped.
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

    ix0, ix1, fx = _taps(x, w)
    iy0, iy1, fy = _taps(y, h)
    v00, v01 = src[iy0, ix0], src[iy0, ix1]
    v10, v11 = src[iy1, ix0], src[iy1, ix1]
    if src.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    out = (1.0 - fy) * top + fy * bot
    if not with_grad:
        return out, inb.astype(np.float64)

    dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = bot - top
    xin = (x >= 0) & (x <= w - 1)
    yin = (y >= 0) & (y <= h - 1)
    if src.ndim == 3:
        xin, yin = xin[..., None], yin[..., None]
    return out, inb.astype(np.float64), np.where(xin, dx, 0.0), np.where(yin, dy, 0.0)


def _check_same_hw(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"{what}: shape mismatch {a.shape[:2]} vs {b.shape[:2]}")


def inverse_warp_flow(src, flow) -> WarpResult:
    """``warped(x, y) = src(x + u, y + v)`` with bilinear sampling."""
    src = np.asarray(src, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    _check_same_hw(src, flow, "inverse_warp_flow")
    grid = pixel_grid(*flow.shape[:2])
    warped, inb = bilinear_sample(src, grid[..., 0] + flow[..., 0], grid[..., 1] + flow[..., 1])
    return WarpResult(warped, inb)


def disparity_to_flow(disp) -> np.ndarray:
    disp = np.asarray(disp, dtype=np.float64)
    return np.stack([-disp, np.zeros_like(disp)], axis=-1)


def inverse_warp_disparity(right, disp) -> WarpResult:
    """Warp the right image into the left view: ``warped(x, y) = right(x - d, y)``."""
    right = np.asarray(right, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    _check_same_hw(right, disp, "inverse_warp_disparity")
    return inverse_warp_flow(right, disparity_to_flow(disp))


def inverse_warp_disparity_via_flow(flow1, disp2) -> WarpResult:
    """Bring the second frame's disparity into frame-1 coordinates along ``flow1``."""
    disp2 = np.asarray(disp2, dtype=np.float64)
    if disp2.ndim != 2:
        raise ValueError("disp2 must be single-channel (H, W)")
    return inverse_warp_flow(disp2, flow1)


def rigid_flow(xi: RigidTransform, disp1, cam: StereoCamera, valid=None) -> RigidFlowResult:
    """Flow and frame-2 disparity induced by moving every pixel's 3D point by ``xi``.

    Pixels with nonpositive disparity, outside ``valid``, or whose
    transformed point lands behind the camera get zero flow and disparity
    and validity 0.
    """
    disp1 = np.asarray(disp1, dtype=np.float64)
    h, w = disp1.shape
    ok = np.isfinite(disp1) & (disp1 > 0)
    if valid is not None:
        ok &= np.asarray(valid) > 0
    grid = pixel_grid(h, w)
    d = np.where(ok, disp1, 1.0)
    z = cam.fb / d
    p = np.stack([(grid[..., 0] - cam.cx) / cam.fx * z, (grid[..., 1] - cam.cy) / cam.fy * z, z], axis=-1)
    q = xi.apply(p)
    ok &= q[..., 2] > 0
    q[..., 2] = np.where(ok, q[..., 2], 1.0)
    pix, d2 = _project(q, cam)
    flow = np.where(ok[..., None], pix - grid, 0.0)
    d2 = np.where(ok, d2, 0.0)
    return RigidFlowResult(flow, d2, ok.astype(np.float64))


def forward_warp_disparity(disp1, xi: RigidTransform, cam: StereoCamera, valid=None):
    """Splat frame-1 disparity into the frame-2 grid.

    Each source pixel lands on the nearest integer target pixel carrying its
    transformed disparity. Collisions keep the largest disparity (nearest
    surface). Returns ``(disparity, validity)``; unhit pixels are 0 / 0.
    """
    disp1 = np.asarray(disp1, dtype=np.float64)
    h, w = disp1.shape
    res = rigid_flow(xi, disp1, cam, valid)
    grid = pixel_grid(h, w)
    tx = np.rint(grid[..., 0] + res.flow[..., 0])
    ty = np.rint(grid[..., 1] + res.flow[..., 1])
    hit = (res.valid > 0) & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    target = (ty[hit] * w + tx[hit]).astype(np.intp)
    out = np.full(h * w, -np.inf)
    np.maximum.at(out, target, res.disparity[hit])
    filled = np.isfinite(out)
    out[~filled] = 0.0
    return out.reshape(h, w), filled.reshape(h, w).astype(np.float64)
