"""Domain types shared by the whole toolkit.

Conventions used everywhere:

* Voxel (x, y, z) is the unit cube [x, x+1) x [y, y+1) x [z, z+1) with its
  sample point at the integer coordinate (x, y, z).  Gaussian centers are
  continuous voxel coordinates in [0, w) x [0, h) x [0, c), so ``floor(mu)``
  is the voxel that contains the center.
* Linear index of a volume voxel: ``idx(x, y, z) = x + w * (y + h * z)``,
  0-based, x fastest.  A flat buffer in that order reshapes to a C-order
  array of shape (c, h, w) indexed ``[z, y, x]``.
* Sinogram bins are indexed (view, detector, slice) with
  ``idx(v, d, s) = s + p * (d + n * v)``, i.e. a C-order (m, n, p) array.
* Stored grids are float32; kernels accumulate in float64.

All types are immutable value objects: their arrays are marked read-only
after construction and methods never mutate in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "BoxConfig",
    "GaussianCloud",
    "OffsetGrid",
    "ParamGradients",
    "ScanGeometry",
    "Sinogram",
    "ValidationError",
    "VolumeGrid",
    "linear_index",
    "make_offset_grid",
    "validate_cloud",
]


class ValidationError(ValueError):
    """Raised when a domain object violates its invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def linear_index(x: int, y: int, z: int, dims: tuple[int, int, int]) -> int:
    """Flat index of voxel (x, y, z) in a (w, h, c) grid, x fastest."""
    w, h, _ = dims
    return x + w * (y + h * z)


@dataclass(frozen=True)
class VolumeGrid:
    """Dense scalar attenuation field on a (w, h, c) voxel grid."""

    dims: tuple[int, int, int]
    data: np.ndarray  # float32, length w*h*c, linear_index order

    def __post_init__(self):
        w, h, c = (int(v) for v in self.dims)
        if min(w, h, c) < 1:
            raise ValidationError(f"volume dims must be positive, got {self.dims}")
        data = np.asarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != w * h * c:
            raise ValidationError(
                f"volume data length {data.size} != w*h*c = {w * h * c}"
            )
        object.__setattr__(self, "dims", (w, h, c))
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "VolumeGrid":
        w, h, c = (int(v) for v in dims)
        return cls((w, h, c), np.zeros(w * h * c, dtype=np.float32))

    @classmethod
    def from_zyx(cls, arr: np.ndarray) -> "VolumeGrid":
        """Build from a (c, h, w) array indexed [z, y, x]."""
        c, h, w = arr.shape
        return cls((w, h, c), np.asarray(arr, dtype=np.float32).reshape(-1))

    @property
    def zyx(self) -> np.ndarray:
        """Read-only (c, h, w) view indexed [z, y, x]."""
        w, h, c = self.dims
        return self.data.reshape(c, h, w)

    def at(self, x: int, y: int, z: int) -> float:
        return float(self.data[linear_index(x, y, z, self.dims)])


@dataclass(frozen=True)
class Sinogram:
    """Line-integral measurements: m views x n detectors x p slices."""

    dims: tuple[int, int, int]
    data: np.ndarray  # float32, length m*n*p, C-order (m, n, p)

    def __post_init__(self):
        m, n, p = (int(v) for v in self.dims)
        if min(m, n, p) < 1:
            raise ValidationError(f"sinogram dims must be positive, got {self.dims}")
        data = np.asarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != m * n * p:
            raise ValidationError(
                f"sinogram data length {data.size} != m*n*p = {m * n * p}"
            )
        if not np.all(np.isfinite(data)):
            raise ValidationError("sinogram contains non-finite values")
        object.__setattr__(self, "dims", (m, n, p))
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_views(cls, arr: np.ndarray) -> "Sinogram":
        """Build from an (m, n, p) array indexed [view, detector, slice]."""
        return cls(arr.shape, np.asarray(arr, dtype=np.float32).reshape(-1))

    @property
    def views(self) -> np.ndarray:
        """Read-only (m, n, p) view indexed [view, detector, slice]."""
        return self.data.reshape(self.dims)


@dataclass(frozen=True)
class BoxConfig:
    """Odd-sized cuboid confining each Gaussian's effect, centered on a voxel."""

    w0: int
    h0: int
    c0: int

    def __post_init__(self):
        for name, v in (("w0", self.w0), ("h0", self.h0), ("c0", self.c0)):
            if v < 1 or v % 2 == 0:
                raise ValidationError(f"box {name} must be odd and positive, got {v}")

    @classmethod
    def cube(cls, k: int) -> "BoxConfig":
        return cls(k, k, k)

    @classmethod
    def for_dims(cls, k: int, dims: Sequence[int]) -> "BoxConfig":
        """Cube of side k, clamped per axis to the largest odd size <= dim.

        Lets a nominal cubic box (e.g. 17) apply to thin volumes such as a
        single-slice 2D problem, where the z extent collapses to 1.
        """
        sides = []
        for d in dims:
            s = min(int(k), int(d))
            if s % 2 == 0:
                s -= 1
            sides.append(max(s, 1))
        return cls(*sides)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.w0, self.h0, self.c0)

    @property
    def half(self) -> tuple[int, int, int]:
        return ((self.w0 - 1) // 2, (self.h0 - 1) // 2, (self.c0 - 1) // 2)

    @property
    def n_offsets(self) -> int:
        return self.w0 * self.h0 * self.c0

    @property
    def extent(self) -> int:
        return max(self.w0, self.h0, self.c0)


@dataclass(frozen=True)
class OffsetGrid:
    """All integer offsets of a centered box, ordered by (z, y, x)."""

    offsets: np.ndarray  # (K, 3) int64 rows (ox, oy, oz)

    def __post_init__(self):
        object.__setattr__(
            self, "offsets", _frozen(np.asarray(self.offsets, dtype=np.int64))
        )

    def __len__(self) -> int:
        return self.offsets.shape[0]


def make_offset_grid(box: BoxConfig) -> OffsetGrid:
    """Lattice offsets of the centered box, lexicographic in (z, y, x).

    Row k holds (ox, oy, oz) with each axis spanning -half..+half and x
    varying fastest, matching the volume's linear-index order.
    """
    hx, hy, hz = box.half
    oz, oy, ox = np.meshgrid(
        np.arange(-hz, hz + 1),
        np.arange(-hy, hy + 1),
        np.arange(-hx, hx + 1),
        indexing="ij",
    )
    offs = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)
    return OffsetGrid(offs)


@dataclass(frozen=True)
class GaussianCloud:
    """Trainable state: N isotropic Gaussians in voxel coordinates.

    Construction only coerces shapes; use :func:`validate_cloud` for the
    invariant report and ops revalidate before computing.
    """

    mu: np.ndarray  # (N, 3) float64 centers (x, y, z)
    sigma: np.ndarray  # (N,) float64, isotropic std-dev in voxels
    intensity: np.ndarray  # (N,) float64, non-negative

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[1] != 3:
            raise ValidationError(f"mu must be (N, 3), got {mu.shape}")
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(
            self, "sigma", _frozen(np.asarray(self.sigma, dtype=np.float64).reshape(-1))
        )
        object.__setattr__(
            self,
            "intensity",
            _frozen(np.asarray(self.intensity, dtype=np.float64).reshape(-1)),
        )

    @property
    def n(self) -> int:
        return self.mu.shape[0]


def validate_cloud(cloud: GaussianCloud) -> list[str]:
    """Diagnostic invariant check; returns one message per violation.

    An empty list means the cloud is valid.  Reports every violation with
    index and field rather than stopping at the first.
    """
    issues: list[str] = []
    n = cloud.mu.shape[0]
    if n < 1:
        issues.append("cloud is empty: N must be >= 1")
    if cloud.sigma.shape[0] != n:
        issues.append(
            f"length mismatch: mu has {n} rows, sigma has {cloud.sigma.shape[0]}"
        )
    if cloud.intensity.shape[0] != n:
        issues.append(
            f"length mismatch: mu has {n} rows, intensity has "
            f"{cloud.intensity.shape[0]}"
        )
    for i in np.nonzero(~np.isfinite(cloud.mu).all(axis=1))[0]:
        issues.append(f"index {int(i)}, field mu: non-finite value")
    for i in np.nonzero(~(cloud.sigma > 0))[0]:
        issues.append(f"index {int(i)}, field sigma: must be > 0, got {cloud.sigma[i]}")
    for i in np.nonzero(~(cloud.intensity >= 0))[0]:
        issues.append(
            f"index {int(i)}, field intensity: must be >= 0, got {cloud.intensity[i]}"
        )
    return issues


def require_valid_cloud(cloud: GaussianCloud) -> None:
    issues = validate_cloud(cloud)
    if issues:
        raise ValidationError("invalid Gaussian cloud: " + "; ".join(issues))


@dataclass(frozen=True)
class ParamGradients:
    """Per-Gaussian gradients plus running densification statistics.

    ``accum_pos_grad_norm`` sums the per-Gaussian positional gradient norms
    since the last densification event; ``iters_since_densify`` counts how
    many backward passes contributed to it.
    """

    d_mu: np.ndarray  # (N, 3)
    d_sigma: np.ndarray  # (N,)
    d_intensity: np.ndarray  # (N,)
    accum_pos_grad_norm: np.ndarray  # (N,), non-negative
    iters_since_densify: int = 0

    def __post_init__(self):
        d_mu = np.asarray(self.d_mu, dtype=np.float64)
        n = d_mu.shape[0]
        for name in ("d_sigma", "d_intensity", "accum_pos_grad_norm"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.shape[0] != n:
                raise ValidationError(f"{name} length {arr.shape[0]} != N = {n}")
            object.__setattr__(self, name, _frozen(arr))
        if np.any(self.accum_pos_grad_norm < 0):
            raise ValidationError("accum_pos_grad_norm entries must be non-negative")
        object.__setattr__(self, "d_mu", _frozen(d_mu))

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(
            np.zeros((n, 3)), np.zeros(n), np.zeros(n), np.zeros(n), 0
        )


@dataclass(frozen=True)
class ScanGeometry:
    """Per-slice 2D acquisition description.

    ``variant`` is "parallel" or "fan".  View angles are radians, measured
    counterclockwise from the +x axis, strictly increasing within [0, 2*pi).
    Fan geometry adds source-to-origin and origin-to-detector distances in
    voxel units; the flat detector is perpendicular to the central ray.
    """

    variant: str
    n_views: int
    n_detectors: int
    detector_spacing: float
    view_angles: np.ndarray
    source_to_origin: float | None = None
    origin_to_detector: float | None = None

    def __post_init__(self):
        if self.variant not in ("parallel", "fan"):
            raise ValidationError(f"unknown geometry variant {self.variant!r}")
        if self.n_views < 1 or self.n_detectors < 1:
            raise ValidationError("need at least one view and one detector")
        if not self.detector_spacing > 0:
            raise ValidationError("detector_spacing must be positive")
        angles = np.asarray(self.view_angles, dtype=np.float64).reshape(-1)
        if angles.shape[0] != self.n_views:
            raise ValidationError(
                f"{angles.shape[0]} angles for n_views = {self.n_views}"
            )
        if np.any(angles < 0) or np.any(angles >= 2 * np.pi):
            raise ValidationError("view angles must lie in [0, 2*pi)")
        if self.n_views > 1 and np.any(np.diff(angles) <= 0):
            raise ValidationError("view angles must be strictly increasing")
        if self.variant == "fan":
            if self.source_to_origin is None or self.origin_to_detector is None:
                raise ValidationError("fan geometry needs both distances")
            if self.source_to_origin <= 0 or self.origin_to_detector <= 0:
                raise ValidationError("fan distances must be positive")
        object.__setattr__(self, "view_angles", _frozen(angles))

    @classmethod
    def parallel(
        cls, n_views: int, n_detectors: int, detector_spacing: float = 1.0,
        angle_start: float = 0.0, angle_extent: float = np.pi,
    ) -> "ScanGeometry":
        angles = angle_start + angle_extent * np.arange(n_views) / n_views
        return cls("parallel", n_views, n_detectors, detector_spacing, angles)

    @classmethod
    def fan(
        cls, n_views: int, n_detectors: int, detector_spacing: float,
        source_to_origin: float, origin_to_detector: float,
        angle_start: float = 0.0, angle_extent: float = np.pi,
    ) -> "ScanGeometry":
        angles = angle_start + angle_extent * np.arange(n_views) / n_views
        return cls(
            "fan", n_views, n_detectors, detector_spacing, angles,
            source_to_origin, origin_to_detector,
        )

    def check_volume(self, dims: Sequence[int]) -> None:
        """Reject fan setups whose source sits inside the slice's circle."""
        w, h = int(dims[0]), int(dims[1])
        if self.variant == "fan":
            radius = 0.5 * float(np.hypot(w, h))
            assert self.source_to_origin is not None
            if self.source_to_origin <= radius:
                raise ValidationError(
                    f"fan source distance {self.source_to_origin} is inside the "
                    f"slice's circumscribed radius {radius:.1f}"
                )
