"""Composite training objective and its analytic gradients.

L1 and SSIM compare estimated and measured projections; total variation
regularizes the volume.  Every term returns both the scalar value and the
exact gradient with respect to its input, so the optimization loop never
needs numeric differentiation.

SSIM uses an 11x11 Gaussian window (sigma 1.5) and the usual stability
constants C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L taken from the
reference's maximum.  Windowed statistics are evaluated on fully covered
(valid) positions only; for images smaller than the window the window
shrinks to fit with renormalized weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import Sinogram, ValidationError, VolumeGrid

__all__ = [
    "LossWeights",
    "WEIGHT_PRESETS",
    "l1_loss",
    "ssim_loss",
    "ssim_value",
    "total_loss",
    "tv_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights for the L1, SSIM and TV terms."""

    lambda1: float = 0.6
    lambda2: float = 0.2
    lambda3: float = 1.0

    def __post_init__(self):
        ws = (self.lambda1, self.lambda2, self.lambda3)
        if any(v < 0 for v in ws):
            raise ValidationError(f"loss weights must be non-negative, got {ws}")
        if not any(v > 0 for v in ws):
            raise ValidationError("at least one loss weight must be positive")


# Ablation presets: L1 alone, the two-term variant, and the full objective.
WEIGHT_PRESETS = {
    "l1": LossWeights(1.0, 0.0, 0.0),
    "l1+ssim": LossWeights(0.8, 0.2, 0.0),
    "l1+ssim+tv": LossWeights(0.6, 0.2, 1.0),
}


def _match_dims(pred: Sinogram, ref: Sinogram) -> None:
    if pred.dims != ref.dims:
        raise ValidationError(f"sinogram dims differ: {pred.dims} vs {ref.dims}")


def l1_loss(pred: Sinogram, ref: Sinogram) -> tuple[float, np.ndarray]:
    """Mean absolute error over all bins; subgradient 0 at ties.

    Returns (value, gradient wrt pred) with the gradient shaped (m, n, p).
    """
    _match_dims(pred, ref)
    diff = pred.views.astype(np.float64) - ref.views.astype(np.float64)
    count = diff.size
    value = float(np.abs(diff).sum() / count)
    grad = np.sign(diff) / count
    return value, grad


def _gaussian_window(k: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _valid_corr(img: np.ndarray, gr: np.ndarray, gc: np.ndarray) -> np.ndarray:
    """Separable correlation, fully covered window positions only."""
    rr = (gr.size - 1) // 2
    rc = (gc.size - 1) // 2
    t = correlate1d(img, gr, axis=0, mode="constant")
    t = correlate1d(t, gc, axis=1, mode="constant")
    return t[rr : img.shape[0] - rr, rc : img.shape[1] - rc]


def _valid_corr_adjoint(
    grad: np.ndarray, gr: np.ndarray, gc: np.ndarray, shape: tuple[int, int]
) -> np.ndarray:
    """Transpose of :func:`_valid_corr` for symmetric windows."""
    rr = (gr.size - 1) // 2
    rc = (gc.size - 1) // 2
    full = np.zeros(shape, dtype=np.float64)
    full[rr : shape[0] - rr, rc : shape[1] - rc] = grad
    full = correlate1d(full, gr, axis=0, mode="constant")
    return correlate1d(full, gc, axis=1, mode="constant")


def _ssim_windows(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    kr = min(11, shape[0])
    kc = min(11, shape[1])
    kr -= 1 - kr % 2
    kc -= 1 - kc % 2
    return _gaussian_window(kr), _gaussian_window(kc)


def _ssim_slice(
    x: np.ndarray, y: np.ndarray, c1: float, c2: float, want_grad: bool
):
    """Mean SSIM of one image pair and, optionally, d(mean SSIM)/dx."""
    gr, gc = _ssim_windows(x.shape)
    mx = _valid_corr(x, gr, gc)
    my = _valid_corr(y, gr, gc)
    x2w = _valid_corr(x * x, gr, gc)
    y2w = _valid_corr(y * y, gr, gc)
    xyw = _valid_corr(x * y, gr, gc)
    sx2 = x2w - mx * mx
    sy2 = y2w - my * my
    sxy = xyw - mx * my
    a1 = 2.0 * mx * my + c1
    a2 = 2.0 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sx2 + sy2 + c2
    s = (a1 * a2) / (b1 * b2)
    mean_ssim = float(s.mean())
    if not want_grad:
        return mean_ssim, None
    npix = s.size
    # route derivatives through the windowed fields mx, x2w, xyw
    d_mx = (2.0 * my * (a2 - a1)) / (b1 * b2) - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2)
    d_x2w = -s / b2
    d_xyw = 2.0 * a1 / (b1 * b2)
    grad = _valid_corr_adjoint(d_mx, gr, gc, x.shape)
    grad += 2.0 * x * _valid_corr_adjoint(d_x2w, gr, gc, x.shape)
    grad += y * _valid_corr_adjoint(d_xyw, gr, gc, x.shape)
    return mean_ssim, grad / npix


def ssim_value(x: np.ndarray, y: np.ndarray, max_val: float | None = None) -> float:
    """Mean SSIM of a 2D image pair (metric form, no gradient)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"image shapes differ: {x.shape} vs {y.shape}")
    lmax = float(np.max(y)) if max_val is None else float(max_val)
    if lmax <= 0:
        lmax = 1.0
    c1 = (0.01 * lmax) ** 2
    c2 = (0.03 * lmax) ** 2
    val, _ = _ssim_slice(x, y, c1, c2, want_grad=False)
    return val


def ssim_loss(pred: Sinogram, ref: Sinogram) -> tuple[float, np.ndarray]:
    """1 - mean SSIM over per-slice (m, n) projection images.

    Returns (value, gradient wrt pred) with the gradient shaped (m, n, p).
    """
    _match_dims(pred, ref)
    m, n, p = pred.dims
    xv = pred.views.astype(np.float64)
    yv = ref.views.astype(np.float64)
    lmax = float(yv.max())
    if lmax <= 0:
        lmax = 1.0
    c1 = (0.01 * lmax) ** 2
    c2 = (0.03 * lmax) ** 2
    grad = np.zeros((m, n, p), dtype=np.float64)
    total = 0.0
    for z in range(p):
        val, g = _ssim_slice(xv[:, :, z], yv[:, :, z], c1, c2, want_grad=True)
        total += val
        grad[:, :, z] = g
    mean_ssim = total / p
    return 1.0 - mean_ssim, -grad / p


def tv_loss(vol: VolumeGrid) -> tuple[float, np.ndarray]:
    """Anisotropic total variation with zero-flux boundaries.

    Mean over voxels of the summed absolute forward differences along each
    axis (no difference across the last index).  Returns (value, gradient
    wrt vol) with the gradient shaped (c, h, w); the gradient is the
    divergence of the sign field.
    """
    v = vol.zyx.astype(np.float64)
    count = v.size
    total = 0.0
    grad = np.zeros_like(v)
    for axis in range(3):
        if v.shape[axis] < 2:
            continue
        d = np.diff(v, axis=axis)
        total += np.abs(d).sum()
        s = np.sign(d)
        lead = [slice(None)] * 3
        lag = [slice(None)] * 3
        lead[axis] = slice(1, None)
        lag[axis] = slice(0, -1)
        grad[tuple(lead)] += s
        grad[tuple(lag)] -= s
    return total / count, grad / count


def total_loss_detailed(
    pred: Sinogram,
    ref: Sinogram,
    vol: VolumeGrid,
    weights: LossWeights,
) -> tuple[float, np.ndarray, np.ndarray, dict]:
    """Weighted sum plus the unweighted per-term values.

    Terms with zero weight are skipped entirely and report nan.
    """
    value = 0.0
    parts = {"l1": float("nan"), "ssim": float("nan"), "tv": float("nan")}
    grad_pred = np.zeros(pred.views.shape, dtype=np.float64)
    grad_vol = np.zeros(vol.zyx.shape, dtype=np.float64)
    if weights.lambda1 > 0:
        v, g = l1_loss(pred, ref)
        parts["l1"] = v
        value += weights.lambda1 * v
        grad_pred += weights.lambda1 * g
    if weights.lambda2 > 0:
        v, g = ssim_loss(pred, ref)
        parts["ssim"] = v
        value += weights.lambda2 * v
        grad_pred += weights.lambda2 * g
    if weights.lambda3 > 0:
        v, g = tv_loss(vol)
        parts["tv"] = v
        value += weights.lambda3 * v
        grad_vol += weights.lambda3 * g
    return value, grad_pred, grad_vol, parts


def total_loss(
    pred: Sinogram,
    ref: Sinogram,
    vol: VolumeGrid,
    weights: LossWeights,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted sum of the three terms.

    Returns (value, grad wrt pred (m, n, p), grad wrt vol (c, h, w)).
    """
    value, grad_pred, grad_vol, _ = total_loss_detailed(pred, ref, vol, weights)
    return value, grad_pred, grad_vol
