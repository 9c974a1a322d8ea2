"""Reconstruction quality metrics.

PSNR(x, y) = 10 log10(MAX^2 / MSE) with MAX taken from the reference
unless declared.  Values are capped at 200 dB so identical inputs report a
finite sentinel.  SSIM reuses the windowed statistics of the loss module.

Two aggregation styles are reported: whole-volume (PSNR over all voxels,
SSIM averaged over axial slices) and per-plane slice means across the
axial, coronal and sagittal stacks.
"""

from __future__ import annotations

import numpy as np

from .core import ValidationError, VolumeGrid
from .loss import ssim_value

__all__ = ["PSNR_CAP_DB", "psnr", "volume_metrics"]

PSNR_CAP_DB = 200.0


def psnr(
    x: np.ndarray, y: np.ndarray, max_val: float | None = None
) -> float:
    """Peak signal-to-noise ratio of x against reference y, in dB."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shapes differ: {x.shape} vs {y.shape}")
    peak = float(np.max(y)) if max_val is None else float(max_val)
    if peak <= 0:
        raise ValidationError(f"reference peak must be positive, got {peak}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def _plane_slices(vol: np.ndarray, plane: str):
    # vol is (c, h, w) indexed [z, y, x]
    if plane == "axial":
        return [vol[k] for k in range(vol.shape[0])]
    if plane == "coronal":
        return [vol[:, k, :] for k in range(vol.shape[1])]
    if plane == "sagittal":
        return [vol[:, :, k] for k in range(vol.shape[2])]
    raise ValidationError(f"unknown plane {plane!r}")


def volume_metrics(
    recon: VolumeGrid, truth: VolumeGrid, max_val: float | None = None
) -> dict:
    """Whole-volume and per-plane PSNR/SSIM report."""
    if recon.dims != truth.dims:
        raise ValidationError(f"dims differ: {recon.dims} vs {truth.dims}")
    rv = recon.zyx.astype(np.float64)
    tv = truth.zyx.astype(np.float64)
    peak = float(tv.max()) if max_val is None else float(max_val)
    if peak <= 0:
        peak = 1.0
    report: dict = {
        "psnr_volume": psnr(rv, tv, max_val=peak),
        "ssim_volume": float(
            np.mean([ssim_value(r, t, peak) for r, t in zip(rv, tv)])
        ),
    }
    for plane in ("axial", "coronal", "sagittal"):
        rs = _plane_slices(rv, plane)
        ts = _plane_slices(tv, plane)
        report[f"psnr_{plane}"] = float(
            np.mean([psnr(r, t, max_val=peak) for r, t in zip(rs, ts)])
        )
        report[f"ssim_{plane}"] = float(
            np.mean([ssim_value(r, t, peak) for r, t in zip(rs, ts)])
        )
    return report
