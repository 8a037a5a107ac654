"""Readers and writers for PFM, KITTI flow/disparity PNG, label PNG and small text configs.

Every reader rejects malformed input with :class:`FormatError` instead of
truncating.  Writers are deterministic, so writing what a reader returned
reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np

from .core import StereoCamera
from .loss import LossWeights


class FormatError(ValueError):
    """A file does not match the format it claims to be in."""


# ---------------------------------------------------------------- PFM

_PFM_MAGIC = re.compile(rb"^P([Ff])(\d*)$")


def _pfm_line(f) -> bytes:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise FormatError("truncated PFM header")
    return line.rstrip(b"\r\n")


def read_pfm(path, return_scale: bool = False):
    """Load a PFM file as float32, top row first.

    ``Pf`` gives ``(H, W)``, ``PF`` gives ``(H, W, 3)``.  ``PF<C>`` (for
    example ``PF7``) is a local extension for ``C``-channel maps such as
    segmentation posteriors.
    """
    with open(path, "rb") as f:
        m = _PFM_MAGIC.match(_pfm_line(f))
        if m is None:
            raise FormatError(f"{path}: not a PFM file")
        if m.group(1) == b"f":
            if m.group(2):
                raise FormatError(f"{path}: Pf takes no channel count")
            channels = 1
        else:
            channels = int(m.group(2)) if m.group(2) else 3
            if channels < 1:
                raise FormatError(f"{path}: bad channel count")
        dims = _pfm_line(f).split()
        if len(dims) != 2 or not all(d.isdigit() for d in dims):
            raise FormatError(f"{path}: bad PFM dimensions {dims!r}")
        width, height = int(dims[0]), int(dims[1])
        try:
            scale = float(_pfm_line(f))
        except ValueError:
            raise FormatError(f"{path}: bad PFM scale") from None
        if scale == 0 or not np.isfinite(scale):
            raise FormatError(f"{path}: PFM scale must be finite and nonzero")
        payload = f.read()
    count = width * height * channels
    if len(payload) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} data bytes, found {len(payload)}")
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    data = np.flipud(data).astype(np.float32)
    if channels == 1:
        data = data[..., 0]
    return (data, scale) if return_scale else data


def write_pfm(path, data, scale: float = -1.0) -> None:
    """Write ``(H, W)`` or ``(H, W, C)`` data; a negative ``scale`` means little-endian."""
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3:
        c = data.shape[2]
        magic = b"PF" if c == 3 else b"PF%d" % c
    else:
        raise ValueError(f"PFM holds 2-D or 3-D arrays, got shape {data.shape}")
    if scale == 0:
        raise ValueError("scale must be nonzero")
    h, w = data.shape[:2]
    dtype = "<f4" if scale < 0 else ">f4"
    body = np.ascontiguousarray(np.flipud(data), dtype=dtype).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n" + b"%d %d\n" % (w, h) + repr(float(scale)).encode() + b"\n" + body)


# ---------------------------------------------------------------- PNG

def _read_png16(path, channels: int) -> np.ndarray:
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable PNG")
    got = 1 if img.ndim == 2 else img.shape[2]
    if img.dtype != np.uint16 or got != channels:
        raise FormatError(f"{path}: expected 16-bit {channels}-channel PNG, got {img.dtype} with {got}")
    return img


def _write_png(path, img: np.ndarray) -> None:
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise FormatError(f"{path}: PNG encoding failed")
    Path(path).write_bytes(buf.tobytes())


def read_kitti_flow(path):
    """``(flow (H, W, 2), valid (H, W))``; u = (R - 2^15) / 64, v likewise from G, valid = B != 0."""
    img = _read_png16(path, 3)
    b, g, r = img[..., 0], img[..., 1], img[..., 2]
    flow = np.stack([(r.astype(np.float64) - 2 ** 15) / 64.0, (g.astype(np.float64) - 2 ** 15) / 64.0], axis=-1)
    return flow, (b != 0).astype(np.float64)


def encode_kitti_flow(flow, valid=None) -> np.ndarray:
    """16-bit BGR image for ``flow``; values outside the representable range are clipped."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    valid = np.ones(flow.shape[:2]) if valid is None else np.asarray(valid)
    enc = np.clip(np.rint(flow * 64.0 + 2 ** 15), 0, 65535)
    enc = np.where(np.isfinite(enc), enc, 2 ** 15).astype(np.uint16)
    b = (valid > 0).astype(np.uint16)
    return np.stack([b, enc[..., 1], enc[..., 0]], axis=-1)


def write_kitti_flow(path, flow, valid=None) -> None:
    _write_png(path, encode_kitti_flow(flow, valid))


def read_kitti_disparity(path):
    """``(disparity (H, W), valid (H, W))``; d = pixel / 256, pixel 0 is invalid."""
    img = _read_png16(path, 1)
    return img.astype(np.float64) / 256.0, (img > 0).astype(np.float64)


def encode_kitti_disparity(disp, valid=None) -> np.ndarray:
    disp = np.asarray(disp, dtype=np.float64)
    if disp.ndim != 2:
        raise ValueError(f"disparity must be (H, W), got {disp.shape}")
    ok = np.isfinite(disp) & (disp > 0)
    if valid is not None:
        ok &= np.asarray(valid) > 0
    enc = np.clip(np.rint(np.where(ok, disp, 0.0) * 256.0), 0, 65535)
    # a valid but tiny disparity would otherwise read back as invalid
    enc = np.where(ok, np.maximum(enc, 1), 0)
    return enc.astype(np.uint16)


def write_kitti_disparity(path, disp, valid=None) -> None:
    _write_png(path, encode_kitti_disparity(disp, valid))


def read_labels(path) -> np.ndarray:
    """8-bit single-channel label map (CityScapes train ids by default)."""
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None or img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"{path}: expected an 8-bit single-channel label PNG")
    return img.astype(np.int64)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must be a 2-D map of ids in [0, 255]")
    _write_png(path, labels.astype(np.uint8))


def read_image(path) -> np.ndarray:
    """8- or 16-bit PNG as float RGB (or gray) in [0, 1]."""
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None or img.dtype not in (np.uint8, np.uint16):
        raise FormatError(f"{path}: not a readable 8/16-bit PNG")
    if img.ndim == 3:
        img = img[..., :3][..., ::-1]
    return img.astype(np.float64) / np.iinfo(img.dtype).max


def write_image(path, img) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    enc = np.rint(img * 65535).astype(np.uint16)
    _write_png(path, enc[..., ::-1] if enc.ndim == 3 else enc)


# ---------------------------------------------------------------- text configs

def read_intrinsics(path) -> StereoCamera:
    """One line of five numbers: fx fy cx cy baseline."""
    tokens = Path(path).read_text().split()
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise FormatError(f"{path}: intrinsics must be numeric") from None
    if len(vals) != 5:
        raise FormatError(f"{path}: expected 5 numbers (fx fy cx cy b), got {len(vals)}")
    try:
        return StereoCamera(*vals)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def write_intrinsics(path, cam: StereoCamera) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in (cam.fx, cam.fy, cam.cx, cam.cy, cam.baseline)) + "\n")


def parse_weights(text: str) -> LossWeights:
    """``key = value`` lines mirroring :class:`LossWeights`; ``#`` starts a comment.

    ``omega`` takes a comma-separated list; ``normalize`` takes true/false.
    Unknown keys are an error so typos do not pass silently.
    """
    known = {f.name: f for f in fields(LossWeights)}
    kw = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"weights line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise FormatError(f"weights line {n}: unknown key {key!r}")
        try:
            if key == "omega":
                kw[key] = tuple(float(v) for v in val.split(",") if v.strip())
            elif key == "flow_penalty":
                kw[key] = val
            elif key == "normalize":
                if val.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(val)
                kw[key] = val.lower() in ("true", "1")
            else:
                kw[key] = float(val)
        except ValueError:
            raise FormatError(f"weights line {n}: bad value for {key}") from None
    try:
        return LossWeights(**kw)
    except ValueError as e:
        raise FormatError(str(e)) from None


def read_weights(path) -> LossWeights:
    return parse_weights(Path(path).read_text())


# ---------------------------------------------------------------- manifests

FORMATS = ("pfm", "kitti_flow_png", "kitti_disp_png", "label_png", "image_png")


def _threads() -> int:
    n = int(os.environ.get("SENSEFLOW_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def load_map(path, fmt: str):
    """Read one file; flow and disparity PNGs return ``(values, valid)``."""
    if fmt == "pfm":
        return read_pfm(path)
    if fmt == "kitti_flow_png":
        return read_kitti_flow(path)
    if fmt == "kitti_disp_png":
        return read_kitti_disparity(path)
    if fmt == "label_png":
        return read_labels(path)
    if fmt == "image_png":
        return read_image(path)
    raise FormatError(f"unknown map format {fmt!r}")


@dataclass
class FileBundleManifest:
    """Named map roles pointing at files, with a format per entry.

    Relative paths resolve against ``root`` (the manifest's directory when
    loaded from disk).
    """
    entries: dict = field(default_factory=dict)  # role -> {"path": ..., "format": ...}
    intrinsics: str | None = None
    root: str = "."

    def add(self, role: str, path, fmt: str) -> None:
        if fmt not in FORMATS:
            raise ValueError(f"unknown map format {fmt!r}")
        self.entries[role] = {"path": str(path), "format": fmt}

    def path(self, role: str) -> Path:
        if role not in self.entries:
            raise KeyError(f"manifest has no {role!r} entry")
        return Path(self.root) / self.entries[role]["path"]

    def check(self) -> None:
        missing = [r for r in self.entries if not self.path(r).is_file()]
        if self.intrinsics is not None and not (Path(self.root) / self.intrinsics).is_file():
            missing.append("intrinsics")
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {', '.join(missing)}")

    def load(self, role: str):
        return load_map(self.path(role), self.entries[role]["format"])

    def load_many(self, roles) -> dict:
        """Load several roles, concurrently up to ``SENSEFLOW_THREADS`` workers."""
        roles = list(roles)
        with ThreadPoolExecutor(max_workers=min(_threads(), max(len(roles), 1))) as ex:
            return dict(zip(roles, ex.map(self.load, roles)))

    def camera(self) -> StereoCamera:
        if self.intrinsics is None:
            raise KeyError("manifest has no intrinsics")
        return read_intrinsics(Path(self.root) / self.intrinsics)

    def to_json(self) -> str:
        return json.dumps({"entries": self.entries, "intrinsics": self.intrinsics}, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_file(cls, path) -> "FileBundleManifest":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e}") from None
        if not isinstance(d, dict) or not isinstance(d.get("entries", {}), dict):
            raise FormatError(f"{path}: manifest must be an object with an 'entries' map")
        m = cls(root=str(Path(path).parent), intrinsics=d.get("intrinsics"))
        for role, e in d.get("entries", {}).items():
            if not isinstance(e, dict) or "path" not in e or e.get("format") not in FORMATS:
                raise FormatError(f"{path}: bad entry for {role!r}")
            m.entries[role] = {"path": e["path"], "format": e["format"]}
        m.check()
        return m


def load_auto(path):
    """Pick a reader from the extension: ``.pfm`` or KITTI PNG by channel count."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() != ".png":
        raise FormatError(f"{path}: unsupported extension")
    if not path.is_file():
        raise FileNotFoundError(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable PNG")
    if img.dtype == np.uint16 and img.ndim == 3 and img.shape[2] == 3:
        return read_kitti_flow(path)
    if img.dtype == np.uint16 and img.ndim == 2:
        return read_kitti_disparity(path)
    if img.dtype == np.uint8 and img.ndim == 2:
        return read_labels(path)
    return read_image(path)
