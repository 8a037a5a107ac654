"""Analytic synthetic stereo scenes built from textured planes.

Everything is ray-cast in closed form, so disparity, flow and occlusion are
exact up to float64 rounding.  Plane geometry is given in frame-1 left
camera coordinates (x right, y down, z forward); a plane is the set
``normal . p == offset`` with ``offset > 0`` and the camera on the side the
normal points away from.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import RigidTransform, StereoCamera, pixel_grid, se3_exp

SKY_LABEL = 10
OCCLUSION_RTOL = 1e-6


class SceneSpecError(ValueError):
    pass


@dataclass
class Plane:
    normal: tuple
    offset: float
    label: int = 0
    texture_seed: int = 0
    motion: Optional[RigidTransform] = None  # object motion in frame-1 coordinates, before ego
    bounds: Optional[tuple] = None  # ((xmin, xmax), (ymin, ymax), (zmin, zmax)) in frame-1 coordinates
    wavelength: tuple = (1.0, 4.0)  # texture wavelength range, metres

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise SceneSpecError("plane normal must be nonzero")
        self.normal = tuple(n / norm)
        self.offset = float(self.offset)

    def transform(self) -> RigidTransform:
        return self.motion or RigidTransform.identity()


@dataclass
class SceneSpec:
    planes: list
    camera: StereoCamera = field(default_factory=StereoCamera.kitti)
    ego: RigidTransform = field(default_factory=RigidTransform.identity)
    height: int = 375
    width: int = 1242
    seed: int = 0


@dataclass
class SceneBundle:
    image1: np.ndarray  # frame 1, left, (H, W, 3) in [0, 1]
    image2: np.ndarray  # frame 2, left
    image_right: np.ndarray  # frame 1, right
    disp1: np.ndarray
    disp2: np.ndarray  # frame 2's own disparity map, frame-2 pixel grid
    disp2_warped: np.ndarray  # frame-2 disparity of each frame-1 pixel's point
    flow: np.ndarray
    occ_flow: np.ndarray
    occ_disp: np.ndarray
    labels: np.ndarray
    valid: np.ndarray  # frame-1 pixels that hit a plane
    valid2: np.ndarray  # frame-2 pixels that hit a plane
    dynamic: np.ndarray  # frame-1 pixels whose plane carries its own motion
    camera: StereoCamera
    ego: RigidTransform


def _basis(n: np.ndarray):
    a = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


class _Texture:
    """Band-limited sum of sinusoids over plane-local coordinates, three channels."""

    K = 6

    def __init__(self, plane: Plane):
        rng = np.random.default_rng(plane.texture_seed)
        self.e1, self.e2 = _basis(np.asarray(plane.normal))
        lo, hi = plane.wavelength
        wl = rng.uniform(lo, hi, size=(3, self.K))
        ang = rng.uniform(0, 2 * np.pi, size=(3, self.K))
        self.freq = np.stack([np.cos(ang), np.sin(ang)], axis=-1) * (2 * np.pi / wl)[..., None]
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, self.K))
        self.base = rng.uniform(0.35, 0.65, size=3)
        self.amp = 0.3 / self.K

    def __call__(self, p1: np.ndarray) -> np.ndarray:
        s, t = p1 @ self.e1, p1 @ self.e2
        out = np.empty(p1.shape[:-1] + (3,))
        for c in range(3):
            arg = s[..., None] * self.freq[c, :, 0] + t[..., None] * self.freq[c, :, 1] + self.phase[c]
            out[..., c] = self.base[c] + self.amp * np.sin(arg).sum(axis=-1)
        return out


def _rays(x, y, cam: StereoCamera) -> np.ndarray:
    return np.stack([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, np.ones_like(x)], axis=-1)


class _Renderer:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.cam = spec.camera
        self.textures = [_Texture(p) for p in spec.planes]
        self.right = RigidTransform(np.eye(3), [-spec.camera.baseline, 0.0, 0.0])
        # per-plane map from frame-1 coordinates into the frame-2 camera
        self.to_frame2 = [spec.ego @ p.transform() for p in spec.planes]
        for view, maps in (("frame 1", [RigidTransform.identity()] * len(spec.planes)),
                           ("right view", [self.right] * len(spec.planes)),
                           ("frame 2", self.to_frame2)):
            for i, (p, G) in enumerate(zip(spec.planes, maps)):
                _, off = self._moved(p, G)
                if off <= 1e-9:
                    raise SceneSpecError(f"plane {i} does not face the camera in {view} (offset {off:.3g})")

    @staticmethod
    def _moved(plane: Plane, G: RigidTransform):
        n = G.rotation @ np.asarray(plane.normal)
        return n, plane.offset + n @ G.translation

    def cast(self, x, y, maps):
        """Nearest plane along pixel rays of the camera reached by ``maps[k]`` for plane k.

        Returns depth (inf where nothing is hit), plane index (-1) and the
        hit point in frame-1 coordinates.
        """
        rays = _rays(np.asarray(x, float), np.asarray(y, float), self.cam)
        depth = np.full(rays.shape[:-1], np.inf)
        index = np.full(rays.shape[:-1], -1)
        p1 = np.zeros(rays.shape)
        for k, (plane, G) in enumerate(zip(self.spec.planes, maps)):
            n, off = self._moved(plane, G)
            denom = rays @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(denom > 1e-12, off / denom, np.inf)
            hit = np.isfinite(z) & (z > 0) & (z < depth)
            back = G.inverse().apply(rays * np.where(np.isfinite(z), z, 0.0)[..., None])
            if plane.bounds is not None:
                for axis, (lo, hi) in enumerate(plane.bounds):
                    hit &= (back[..., axis] >= lo) & (back[..., axis] <= hi)
            depth = np.where(hit, z, depth)
            index = np.where(hit, k, index)
            p1 = np.where(hit[..., None], back, p1)
        return depth, index, p1

    def shade(self, index, p1):
        img = np.zeros(index.shape + (3,))
        for k, tex in enumerate(self.textures):
            m = index == k
            if m.any():
                img[m] = tex(p1[m])
        return img


def _visible(r: _Renderer, maps, pts_cam: np.ndarray, ok: np.ndarray):
    """Whether camera-frame points are in view and not hidden by a nearer surface."""
    cam, (h, w) = r.cam, (r.spec.height, r.spec.width)
    z = np.where(ok, pts_cam[..., 2], 1.0)
    u = cam.fx * pts_cam[..., 0] / z + cam.cx
    v = cam.fy * pts_cam[..., 1] / z + cam.cy
    inside = ok & (pts_cam[..., 2] > 0) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    depth, _, _ = r.cast(np.where(inside, u, 0.0), np.where(inside, v, 0.0), maps)
    return inside & ~(depth < pts_cam[..., 2] * (1.0 - OCCLUSION_RTOL))


def render_scene(spec: SceneSpec, images: bool = True) -> SceneBundle:
    """Render images, disparities, flow, occlusion and labels for a plane scene.

    Pixels that miss every plane get label ``SKY_LABEL``, zero disparity and
    flow, and validity 0.  With ``images=False`` the three images are zeros.
    """
    r = _Renderer(spec)
    cam, h, w = spec.camera, spec.height, spec.width
    n_planes = len(spec.planes)
    grid = pixel_grid(h, w)
    ident = [RigidTransform.identity()] * n_planes

    z1, k1, p1 = r.cast(grid[..., 0], grid[..., 1], ident)
    valid = k1 >= 0
    labels = np.full((h, w), SKY_LABEL, dtype=np.int64)
    dynamic = np.zeros((h, w), dtype=bool)
    p2 = np.zeros_like(p1)
    for k, plane in enumerate(spec.planes):
        m = k1 == k
        labels[m] = plane.label
        dynamic[m] = plane.motion is not None
        p2[m] = r.to_frame2[k].apply(p1[m])
    ok2 = valid & (p2[..., 2] > 0)
    z2p = np.where(ok2, p2[..., 2], 1.0)
    flow = np.stack([cam.fx * p2[..., 0] / z2p + cam.cx, cam.fy * p2[..., 1] / z2p + cam.cy], axis=-1) - grid
    flow = np.where(ok2[..., None], flow, 0.0)
    disp1 = np.where(valid, cam.fb / np.where(valid, z1, 1.0), 0.0)
    disp2_warped = np.where(ok2, cam.fb / z2p, 0.0)

    z2, k2, q1 = r.cast(grid[..., 0], grid[..., 1], r.to_frame2)
    valid2 = k2 >= 0
    disp2 = np.where(valid2, cam.fb / np.where(valid2, z2, 1.0), 0.0)

    occ_flow = ~_visible(r, r.to_frame2, p2, ok2)
    right_maps = [r.right] * n_planes
    occ_disp = ~_visible(r, right_maps, r.right.apply(p1), valid)

    if images:
        image1 = r.shade(k1, p1)
        image2 = r.shade(k2, q1)
        _, kr, pr = r.cast(grid[..., 0], grid[..., 1], right_maps)
        image_right = r.shade(kr, pr)
    else:
        image1 = image2 = image_right = np.zeros((h, w, 3))

    return SceneBundle(image1, image2, image_right, disp1, disp2, disp2_warped, flow,
                         np.where(valid, occ_flow, 1.0).astype(np.float64),
                         np.where(valid, occ_disp, 1.0).astype(np.float64),
                         labels, valid.astype(np.float64), valid2.astype(np.float64), dynamic, cam, spec.ego)


def random_ego_motion(rng: np.random.Generator, max_rot_deg: float = 2.0, max_trans: float = 0.5) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_rot_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, max_trans)
    R = se3_exp(np.concatenate([axis * angle, [0.0, 0.0, 0.0]])).rotation
    return RigidTransform(R, t)


def driving_scene(seed: int, height: int = 375, width: int = 1242, camera: Optional[StereoCamera] = None,
                  moving_object: bool = False, max_rot_deg: float = 2.0, max_trans: float = 0.5) -> SceneSpec:
    """Road-like scene: ground plane, slanted textured backdrop and a static facade.

    ``moving_object`` adds a fronto-parallel car-labelled plane with its own
    translation.
    """
    rng = np.random.default_rng(seed)
    cam = camera or StereoCamera.kitti()
    tilt = rng.uniform(-0.15, 0.15, size=2)
    planes = [
        Plane((0.0, 1.0, 0.0), rng.uniform(1.5, 1.8), label=0, texture_seed=seed * 7 + 1),
        Plane((tilt[0], tilt[1], 1.0), rng.uniform(30.0, 50.0), label=2, texture_seed=seed * 7 + 2,
              wavelength=(3.0, 10.0)),
        Plane((-1.0, 0.0, rng.uniform(-0.2, 0.2)), rng.uniform(5.0, 8.0), label=2, texture_seed=seed * 7 + 3,
              bounds=((-20.0, 0.0), (-6.0, 1.6), (4.0, 25.0))),
    ]
    if moving_object:
        z = rng.uniform(12.0, 18.0)
        x0 = rng.uniform(-1.0, 2.0)
        motion = RigidTransform(np.eye(3), [rng.uniform(0.5, 1.5), 0.0, rng.uniform(-1.0, 1.0)])
        planes.append(Plane((0.0, 0.0, 1.0), z, label=13, texture_seed=seed * 7 + 4, motion=motion,
                            bounds=((x0, x0 + 3.0), (-0.2, 1.5), (0.0, 100.0)), wavelength=(0.5, 2.0)))
    ego = random_ego_motion(rng, max_rot_deg, max_trans)
    return SceneSpec(planes, cam, ego, height, width, seed)


def _transform_from_json(d) -> Optional[RigidTransform]:
    if d is None:
        return None
    if "twist" in d:
        return se3_exp(d["twist"])
    return RigidTransform(d.get("rotation", np.eye(3)), d.get("translation", [0.0, 0.0, 0.0]))


def scene_from_json(text: str) -> SceneSpec:
    """Parse a scene description.

    Keys: ``height``, ``width``, ``seed``, ``camera`` (fx, fy, cx, cy,
    baseline), ``ego`` and per-plane ``motion`` (either ``twist`` or
    ``rotation``/``translation``), and ``planes`` (normal, offset, label,
    texture_seed, bounds, wavelength).  ``{"preset": "driving", "seed": N}``
    expands to :func:`driving_scene`.
    """
    d = json.loads(text)
    cam = StereoCamera(**d["camera"]) if "camera" in d else StereoCamera.kitti()
    if d.get("preset") == "driving":
        return driving_scene(int(d.get("seed", 0)), int(d.get("height", 375)), int(d.get("width", 1242)), cam,
                             bool(d.get("moving_object", False)))
    if "planes" not in d:
        raise SceneSpecError("scene needs a 'planes' list or a preset")
    planes = []
    for p in d["planes"]:
        p = dict(p)
        p["motion"] = _transform_from_json(p.get("motion"))
        if p.get("bounds") is not None:
            p["bounds"] = tuple(tuple(b) for b in p["bounds"])
        planes.append(Plane(**p))
    ego = _transform_from_json(d.get("ego")) or RigidTransform.identity()
    return SceneSpec(planes, cam, ego, int(d.get("height", 375)), int(d.get("width", 1242)), int(d.get("seed", 0)))
