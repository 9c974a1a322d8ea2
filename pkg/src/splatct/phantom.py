"""Synthetic head phantoms for desk-scale experiments.

Standard Shepp-Logan ellipse/ellipsoid compositions with the modified
(high-contrast) intensities, rasterized additively onto the sample grid.
Coordinates map the grid to [-1, 1] per axis with sample points on the
endpoints; values land in [0, 1] with a peak of exactly 1 in the skull
shell and 0 background.
"""

from __future__ import annotations

import numpy as np

from .core import ValidationError, VolumeGrid

__all__ = ["shepp_logan_2d", "shepp_logan_3d"]

# (value, a, b, x0, y0, phi_deg)
_ELLIPSES_2D = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.605, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]

# (value, a, b, cc, x0, y0, z0, phi_deg); rotation about z only
_ELLIPSOIDS_3D = [
    (1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0),
    (-0.2, 0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0),
    (0.1, 0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0),
    (0.1, 0.023, 0.023, 0.02, 0.0, -0.605, 0.0, 0.0),
    (0.1, 0.023, 0.046, 0.05, 0.06, -0.605, 0.0, 0.0),
]


def _axis(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def _check_dims(dims, min_side=32):
    for d in dims:
        if int(d) != 1 and int(d) < min_side:
            raise ValidationError(
                f"phantom axes must be >= {min_side} voxels (or 1), got {tuple(dims)}"
            )


def shepp_logan_2d(w: int, h: int) -> VolumeGrid:
    """Single-slice head phantom on a (w, h, 1) grid."""
    _check_dims((w, h))
    xs = _axis(w)
    ys = _axis(h)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    img = np.zeros((h, w), dtype=np.float64)
    for val, a, b, x0, y0, phi in _ELLIPSES_2D:
        t = np.deg2rad(phi)
        xr = (X - x0) * np.cos(t) + (Y - y0) * np.sin(t)
        yr = -(X - x0) * np.sin(t) + (Y - y0) * np.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return VolumeGrid.from_zyx(img[None, :, :])


def shepp_logan_3d(w: int, h: int, c: int) -> VolumeGrid:
    """Volumetric head phantom on a (w, h, c) grid."""
    _check_dims((w, h, c))
    xs = _axis(w)
    ys = _axis(h)
    zs = _axis(c)
    vol = np.zeros((c, h, w), dtype=np.float64)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    for val, a, b, cc, x0, y0, z0, phi in _ELLIPSOIDS_3D:
        t = np.deg2rad(phi)
        xr = (X - x0) * np.cos(t) + (Y - y0) * np.sin(t)
        yr = -(X - x0) * np.sin(t) + (Y - y0) * np.cos(t)
        base = (xr / a) ** 2 + (yr / b) ** 2
        for k, z in enumerate(zs):
            zz = ((z - z0) / cc) ** 2
            if zz > 1.0:
                continue
            vol[k][base <= 1.0 - zz] += val
    return VolumeGrid.from_zyx(vol)
