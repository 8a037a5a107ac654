"""Shared geometry: stereo camera, SE(3) arithmetic and image pyramids.

Dense maps are plain numpy arrays shaped ``(H, W)`` for single-channel
maps (disparity, occlusion, validity, labels) and ``(H, W, C)`` otherwise
(flow has ``C == 2``, u rightward then v downward).  Pixel centres sit at
integer coordinates, so the continuous coordinate ``(x, y)`` addresses
``array[y, x]`` directly.

Twists are 6-vectors ordered rotation first, ``[wx, wy, wz, vx, vy, vz]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


class DegenerateGeometryError(np.linalg.LinAlgError):
    """Raised when a geometric problem has no well-conditioned solution."""


@dataclass(frozen=True)
class StereoCamera:
    """Rectified pinhole stereo rig. Focal lengths and principal point in px, baseline in m."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ValueError(f"focal lengths and baseline must be positive: {self}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def fb(self) -> float:
        """Disparity-depth constant: ``z = fb / d``."""
        return self.fx * self.baseline

    @classmethod
    def kitti(cls) -> "StereoCamera":
        return cls(fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854, baseline=0.5327)


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ p == cross(w, p)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class RigidTransform:
    """Point transform ``p -> R p + t``; maps frame-1 camera coordinates into frame 2."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform points shaped ``(..., 3)``."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        # (self @ other).apply(p) == self.apply(other.apply(p))
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for rotation-first twists: ``T exp(d) == exp(Ad d) T``."""
        R, t = self.rotation, self.translation
        Ad = np.zeros((6, 6))
        Ad[:3, :3] = R
        Ad[3:, 3:] = R
        Ad[3:, :3] = hat(t) @ R
        return Ad

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.abs(R.T @ R - np.eye(3)).max() < tol
                and abs(np.linalg.det(R) - 1.0) < tol)


def _so3_coeffs(theta: float):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def se3_exp(delta) -> RigidTransform:
    """Closed-form exponential of a rotation-first twist."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise ValueError("twist must be finite")
    w, v = delta[:3], delta[3:]
    theta = float(np.linalg.norm(w))
    A, B, C = _so3_coeffs(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return RigidTransform(R, V @ v)


def se3_log(T: RigidTransform) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    R = T.rotation
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        w = 0.5 * vee
    elif np.pi - theta < 1e-6:
        # sin(theta) ~ 0: recover the axis from the symmetric part
        S = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(S), 0.0, None))
        k = int(np.argmax(axis))
        axis = S[k] / axis[k]
        axis /= np.linalg.norm(axis)
        if axis @ vee < 0:
            axis = -axis
        w = theta * axis
    else:
        w = theta / (2.0 * np.sin(theta)) * vee
    theta = float(np.linalg.norm(w))
    A, B, _ = _so3_coeffs(theta)
    W = hat(w)
    if theta < _SMALL_ANGLE:
        V_inv = np.eye(3) - 0.5 * W + W @ W / 12.0
    else:
        V_inv = np.eye(3) - 0.5 * W + (1.0 - A / (2.0 * B)) / theta**2 * (W @ W)
    return np.concatenate([w, V_inv @ T.translation])


def se3_compose(a: RigidTransform, delta) -> RigidTransform:
    """Right composition ``a o exp(delta)``."""
    out = a @ se3_exp(delta)
    R = out.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-12:
        out = RigidTransform(_orthonormalize(R), out.translation)
    return out


def inverse_depth(d, cam: StereoCamera):
    return np.asarray(d, dtype=np.float64) / cam.fb


def backproject(x, d, cam: StereoCamera) -> np.ndarray:
    """Lift pixels ``(..., 2)`` with disparity ``d`` to camera-frame points ``(..., 3)``."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("backproject requires positive disparity")
    z = cam.fb / d
    return np.stack([
        (x[..., 0] - cam.cx) / cam.fx * z,
        (x[..., 1] - cam.cy) / cam.fy * z,
        np.broadcast_to(z, x.shape[:-1]),
    ], axis=-1)


def project(p, cam: StereoCamera):
    """Project camera-frame points to ``(pixel (..., 2), disparity (...))``."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise ValueError("point behind camera")
    return _project(p, cam)


def _project(p: np.ndarray, cam: StereoCamera):
    z = p[..., 2]
    pix = np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)
    return pix, cam.fb / z


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Integer pixel coordinates shaped ``(H, W, 2)`` as ``(x, y)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def _pad_even(m: np.ndarray) -> np.ndarray:
    ph, pw = m.shape[0] % 2, m.shape[1] % 2
    if ph or pw:
        pad = [(0, ph), (0, pw)] + [(0, 0)] * (m.ndim - 2)
        m = np.pad(m, pad, mode="edge")
    return m


def avg_pool2(m: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd trailing rows/columns are edge-replicated first."""
    m = _pad_even(np.asarray(m, dtype=np.float64))
    h, w = m.shape[0] // 2, m.shape[1] // 2
    blocks = m.reshape(h, 2, w, 2, *m.shape[2:])
    return blocks.mean(axis=(1, 3))


def pool_masked(m: np.ndarray, valid: np.ndarray):
    """2x2 pooling of a sparse map: mean over valid entries, block valid if any entry is."""
    m = _pad_even(np.asarray(m, dtype=np.float64))
    v = _pad_even(np.asarray(valid, dtype=np.float64))
    h, w = v.shape[0] // 2, v.shape[1] // 2
    count = v.reshape(h, 2, w, 2).sum(axis=(1, 3))
    vb = v.reshape(h, 2, w, 2, *([1] * (m.ndim - 2)))
    mb = np.where(vb > 0, m.reshape(h, 2, w, 2, *m.shape[2:]), 0.0)
    total = mb.sum(axis=(1, 3))
    denom = count.reshape(count.shape + (1,) * (m.ndim - 2))
    out = np.divide(total, denom, out=np.zeros_like(total), where=denom > 0)
    return out, (count > 0).astype(np.float64)


def _check_depth(shape, levels: int):
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = shape[:2]
    for _ in range(levels - 1):
        if h < 2 or w < 2:
            raise ValueError(f"{levels} pyramid levels too deep for a {shape[0]}x{shape[1]} map")
        h, w = (h + 1) // 2, (w + 1) // 2


def build_pyramid(m, levels: int, scale_values: bool = False) -> list[np.ndarray]:
    """Average-pooled pyramid, finest first.

    With ``scale_values`` (flow, disparity) each coarser level's values are
    halved so they stay in level-local pixel units.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_depth(m.shape, levels)
    out = [m]
    for _ in range(levels - 1):
        nxt = avg_pool2(out[-1])
        out.append(nxt * 0.5 if scale_values else nxt)
    return out


def build_masked_pyramid(m, valid, levels: int, scale_values: bool = False):
    """Pyramid of a sparse map and its validity, finest first."""
    m = np.asarray(m, dtype=np.float64)
    _check_depth(m.shape, levels)
    maps = [m]
    masks = [np.asarray(valid, dtype=np.float64)]
    for _ in range(levels - 1):
        nxt, v = pool_masked(maps[-1], masks[-1])
        maps.append(nxt * 0.5 if scale_values else nxt)
        masks.append(v)
    return maps, masks
