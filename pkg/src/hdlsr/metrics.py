"""Image-quality metrics for (H, W, C) cubes normalized to [0, 1]."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _as_hwc(a) -> np.ndarray:
    arr = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) cube, got shape {arr.shape}")
    return arr


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    r, t = _as_hwc(ref), _as_hwc(test)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    return r, t


def psnr_per_band(ref, test) -> np.ndarray:
    r, t = _pair(ref, test)
    mse = np.mean((r - t) ** 2, axis=(0, 1))
    out = np.full(mse.shape, PSNR_CAP_DB)
    ok = mse >= 1e-10
    out[ok] = 10.0 * np.log10(1.0 / mse[ok])
    return out


def mpsnr(ref, test) -> float:
    """Mean over bands of 10 log10(1 / MSE_b), bands with MSE < 1e-10 capped at 100 dB."""
    return float(np.mean(psnr_per_band(ref, test)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # img (H, W, C) -> (H-k+1, W-k+1, C)
    v = sliding_window_view(img, win.shape, axis=(0, 1))  # (Ho, Wo, C, k, k)
    return np.tensordot(v, win, axes=([3, 4], [0, 1]))


def ssim_per_band(ref, test) -> np.ndarray:
    r, t = _pair(ref, test)
    k = SSIM_WINDOW
    if r.shape[0] < k or r.shape[1] < k:
        raise ValueError(f"SSIM window {k}x{k} is larger than the image {r.shape[:2]}")
    win = gaussian_window()
    mu_r = _filter_valid(r, win)
    mu_t = _filter_valid(t, win)
    var_r = _filter_valid(r * r, win) - mu_r**2
    var_t = _filter_valid(t * t, win) - mu_t**2
    cov = _filter_valid(r * t, win) - mu_r * mu_t
    num = (2 * mu_r * mu_t + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_r**2 + mu_t**2 + SSIM_C1) * (var_r + var_t + SSIM_C2)
    return np.mean(num / den, axis=(0, 1))


def mssim(ref, test) -> float:
    return float(np.mean(ssim_per_band(ref, test)))


def spectral_angles(ref, test) -> np.ndarray:
    """Per-pixel angle in degrees; NaN where either spectrum has norm < 1e-12."""
    r, t = _pair(ref, test)
    nr = np.linalg.norm(r, axis=2)
    nt = np.linalg.norm(t, axis=2)
    ok = (nr >= 1e-12) & (nt >= 1e-12)
    # 2 atan2(|u - v|, |u + v|) on unit vectors: same angle as arccos(u.v),
    # but without arccos's loss of precision near 0 and 180 degrees
    u = r[ok] / nr[ok, None]
    v = t[ok] / nt[ok, None]
    ang = np.full(nr.shape, np.nan)
    ang[ok] = np.degrees(2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1)))
    return ang


def sam(ref, test) -> float:
    ang = spectral_angles(ref, test)
    if np.all(np.isnan(ang)):
        raise ValueError("every pixel has a degenerate (zero) spectrum")
    return float(np.nanmean(ang))


def cc_per_band(ref, test) -> np.ndarray:
    """Pearson correlation per band; NaN for bands constant in either cube."""
    r, t = _pair(ref, test)
    dr = r - r.mean(axis=(0, 1))
    dt = t - t.mean(axis=(0, 1))
    sr = np.sqrt(np.sum(dr * dr, axis=(0, 1)))
    st = np.sqrt(np.sum(dt * dt, axis=(0, 1)))
    out = np.full(r.shape[2], np.nan)
    ok = (sr > 0) & (st > 0)
    out[ok] = np.sum(dr * dt, axis=(0, 1))[ok] / (sr[ok] * st[ok])
    return out


def cc(ref, test) -> float:
    per = cc_per_band(ref, test)
    if np.all(np.isnan(per)):
        raise ValueError("every band is constant; correlation undefined")
    return float(np.nanmean(per))


def rmse(ref, test) -> float:
    r, t = _pair(ref, test)
    return float(np.sqrt(np.mean((r - t) ** 2)))


@dataclass
class MetricsReport:
    mpsnr_db: float
    mssim: float
    sam_deg: float
    cc: float
    rmse: float
    psnr_per_band: list[float]
    ssim_per_band: list[float]
    cc_per_band: list[float | None]
    sam_skipped_pixels: int = 0
    cc_skipped_bands: int = 0

    SCALARS = ("mpsnr_db", "mssim", "sam_deg", "cc", "rmse")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)!r}" for k in self.SCALARS]
        lines.append(f"sam_skipped_pixels = {self.sam_skipped_pixels}")
        lines.append(f"cc_skipped_bands = {self.cc_skipped_bands}")
        for key in ("psnr_per_band", "ssim_per_band", "cc_per_band"):
            lines.append(f"{key} = " + ",".join("nan" if v is None else repr(v) for v in getattr(self, key)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def evaluate_cube(ref, test) -> MetricsReport:
    """All five metrics plus the per-band breakdowns."""
    psnr_b = psnr_per_band(ref, test)
    ssim_b = ssim_per_band(ref, test)
    cc_b = cc_per_band(ref, test)
    ang = spectral_angles(ref, test)
    return MetricsReport(
        mpsnr_db=float(np.mean(psnr_b)),
        mssim=float(np.mean(ssim_b)),
        sam_deg=sam(ref, test),
        cc=cc(ref, test),
        rmse=rmse(ref, test),
        psnr_per_band=[float(v) for v in psnr_b],
        ssim_per_band=[float(v) for v in ssim_b],
        cc_per_band=[None if np.isnan(v) else float(v) for v in cc_b],
        sam_skipped_pixels=int(np.isnan(ang).sum()),
        cc_skipped_bands=int(np.isnan(cc_b).sum()),
    )
