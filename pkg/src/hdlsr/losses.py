"""Spatial-spectral gradient loss with analytic gradients.

Each loss takes ``(z_true, z_pred)`` rank-4 arrays and returns
``(value, d value / d z_pred)``. Values are accumulated in float64; the
gradient keeps the dtype of ``z_pred``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    mse: float = 2.0
    spatial: float = 0.1
    spectral: float = 0.1

    def __post_init__(self):
        if min(self.mse, self.spatial, self.spectral) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossValue:
    total: float
    mse: float
    spatial: float
    spectral: float


def _check(z_true: np.ndarray, z_pred: np.ndarray):
    if z_true.shape != z_pred.shape:
        raise ValueError(f"shape mismatch: {z_true.shape} vs {z_pred.shape}")


def mse_loss(z_true: np.ndarray, z_pred: np.ndarray):
    _check(z_true, z_pred)
    e = z_pred.astype(np.float64) - z_true
    n = e.size
    return float(np.mean(e * e)), (2.0 / n * e).astype(z_pred.dtype)


def _diff_loss(e: np.ndarray, axis: int):
    """Mean squared forward difference of ``e`` along ``axis`` and its gradient."""
    if e.shape[axis] < 2:
        return 0.0, np.zeros_like(e)
    d = np.diff(e, axis=axis)
    n = d.size
    value = float(np.mean(d * d))
    gd = 2.0 / n * d
    g = np.zeros_like(e)
    lo = [slice(None)] * e.ndim
    hi = [slice(None)] * e.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    g[tuple(hi)] += gd
    g[tuple(lo)] -= gd
    return value, g


def spatial_gradient_loss(z_true: np.ndarray, z_pred: np.ndarray):
    """Horizontal plus vertical forward-difference error, each averaged over its own positions."""
    _check(z_true, z_pred)
    e = z_pred.astype(np.float64) - z_true
    vx, gx = _diff_loss(e, 2)
    vy, gy = _diff_loss(e, 1)
    return vx + vy, (gx + gy).astype(z_pred.dtype)


def spectral_gradient_loss(z_true: np.ndarray, z_pred: np.ndarray):
    _check(z_true, z_pred)
    e = z_pred.astype(np.float64) - z_true
    v, g = _diff_loss(e, 3)
    return v, g.astype(z_pred.dtype)


def total_loss(z_true: np.ndarray, z_pred: np.ndarray, w: LossWeights = LossWeights()):
    mse, g_mse = mse_loss(z_true, z_pred)
    spa, g_spa = spatial_gradient_loss(z_true, z_pred)
    spe, g_spe = spectral_gradient_loss(z_true, z_pred)
    total = w.mse * mse + w.spatial * spa + w.spectral * spe
    grad = (
        w.mse * g_mse.astype(np.float64) + w.spatial * g_spa.astype(np.float64)
        + w.spectral * g_spe.astype(np.float64)
    ).astype(z_pred.dtype)
    return LossValue(total=total, mse=mse, spatial=spa, spectral=spe), grad
