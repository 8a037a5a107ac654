"""Correlation cost volumes for flow (2D search) and rectified stereo (1D search).

Channel ``(dy + k) * (2k + 1) + (dx + k)`` of a 2D volume holds the
channel-mean dot product between ``f1(p)`` and ``f2(p + (dx, dy))``;
comparison features outside ``f2`` count as zero.  A 1D volume holds only
the ``dy == 0`` row, indexed by ``dx + k``.
"""
from __future__ import annotations

import numpy as np


def _as_features(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f[..., None] if f.ndim == 2 else f


def _correlate(f1, f2, k: int, dys) -> np.ndarray:
    f1, f2 = _as_features(f1), _as_features(f2)
    if f1.shape != f2.shape:
        raise ValueError(f"feature maps differ in shape: {f1.shape} vs {f2.shape}")
    if k < 0:
        raise ValueError("search radius must be >= 0")
    h, w, c = f1.shape
    padded = np.zeros((h + 2 * k, w + 2 * k, c))
    padded[k:k + h, k:k + w] = f2
    out = np.empty((h, w, len(dys) * (2 * k + 1)))
    ch = 0
    for dy in dys:
        for dx in range(-k, k + 1):
            shifted = padded[k + dy:k + dy + h, k + dx:k + dx + w]
            out[..., ch] = np.einsum("hwc,hwc->hw", f1, shifted) / c
            ch += 1
    return out


def correlation_2d(f1, f2, k: int) -> np.ndarray:
    """Cost volume over the square window ``[-k, k]^2``; shape ``(H, W, (2k+1)^2)``."""
    return _correlate(f1, f2, k, range(-k, k + 1))


def correlation_1d(fl, fr, k: int) -> np.ndarray:
    """Cost volume over horizontal displacements ``[-k, k]``; shape ``(H, W, 2k+1)``."""
    return _correlate(fl, fr, k, (0,))


def displacements(k: int, mode: str = "2d") -> list[tuple[int, int]]:
    """``(dx, dy)`` for each output channel, in channel order."""
    dys = range(-k, k + 1) if mode == "2d" else (0,)
    return [(dx, dy) for dy in dys for dx in range(-k, k + 1)]
