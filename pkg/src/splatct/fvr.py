"""Fast volume reconstruction: splat Gaussians onto the voxel grid.

The forward splat confines each Gaussian to an odd-sized box centered on
the voxel containing its mean.  With residual ``dmu = mu - floor(mu)`` the
squared distance of box offset ``b`` from the center is

    D2 = (b - dmu) . (b - dmu) / sigma^2
       = (b.b - b.dmu - dmu.b + dmu.dmu) / sigma^2

The expanded form needs only the constant per-offset ``b.b`` table plus
rank-1 cross terms, and because the covariance is isotropic it separates
per axis, which is what makes the fast path cheap (see
:mod:`splatct._kernels`).  ``reconstruct_plain`` evaluates the unexpanded
form on materialized shifted boxes and exists to validate the fast path
and to benchmark against it; ``reconstruct_direct`` is the unconfined
dense sum used as a brute-force oracle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import get_num_threads

from . import _kernels
from .core import (
    BoxConfig,
    GaussianCloud,
    OffsetGrid,
    ParamGradients,
    ValidationError,
    VolumeGrid,
    make_offset_grid,
    require_valid_cloud,
)

__all__ = [
    "DenseBudgetError",
    "FvrWorkspace",
    "backward",
    "reconstruct",
    "reconstruct_direct",
    "reconstruct_nodecomp",
    "sq_distance_decomposed",
    "sq_distance_direct",
    "truncation_bound",
]

DEFAULT_DENSE_BUDGET = 200_000_000


class DenseBudgetError(RuntimeError):
    """Dense evaluation would exceed the configured element budget."""


@dataclass(frozen=True)
class FvrWorkspace:
    """Precomputed per-box constants shared by every Gaussian.

    ``btb`` holds the exact integer self-product b.b for each offset row,
    the constant first term of the expanded squared distance.
    """

    box: BoxConfig
    offset_grid: OffsetGrid
    btb: np.ndarray  # (K,) float64, exact integers

    @classmethod
    def create(cls, box: BoxConfig) -> "FvrWorkspace":
        grid = make_offset_grid(box)
        offs = grid.offsets
        btb = (offs * offs).sum(axis=1).astype(np.float64)
        btb.setflags(write=False)
        return cls(box, grid, btb)


def sq_distance_direct(b, dmu, sigma):
    """(b - dmu).(b - dmu) / sigma^2, the unexpanded squared distance."""
    b = np.asarray(b, dtype=np.float64)
    dmu = np.asarray(dmu, dtype=np.float64)
    r = b - dmu
    return (r * r).sum(axis=-1) / np.asarray(sigma, dtype=np.float64) ** 2


def sq_distance_decomposed(b, dmu, sigma):
    """Four-term expansion of the squared distance.

    btb - bt_dmu - dmu_tb + dmu_t_dmu, each term scaled by 1/sigma^2.
    Algebraically identical to :func:`sq_distance_direct`; kept separate so
    the identity can be checked term by term.
    """
    b = np.asarray(b, dtype=np.float64)
    dmu = np.asarray(dmu, dtype=np.float64)
    inv = 1.0 / np.asarray(sigma, dtype=np.float64) ** 2
    btb = (b * b).sum(axis=-1)
    btd = (b * dmu).sum(axis=-1)
    dtb = (dmu * b).sum(axis=-1)
    dtd = (dmu * dmu).sum(axis=-1)
    return (btb - btd - dtb + dtd) * inv


def truncation_bound(box: BoxConfig, cloud: GaussianCloud, dims=None) -> float:
    """Upper bound on any voxel value lost to box confinement.

    The nearest dropped voxel sits half+1 offsets from floor(mu) along some
    axis; the residual brings it within distance ``half`` of the center.
    Axes the box already spans (given ``dims``) cannot truncate.
    """
    halves = box.half
    if dims is not None:
        sides = box.shape
        halves = tuple(
            halves[a] for a in range(3) if sides[a] < int(dims[a])
        )
        if not halves:
            return 0.0
    d = min(halves)
    return float(np.sum(cloud.intensity * np.exp(-0.5 * d * d / cloud.sigma**2)))


def _check_args(cloud: GaussianCloud, box: BoxConfig, dims) -> tuple[int, int, int]:
    require_valid_cloud(cloud)
    w, h, c = (int(v) for v in dims)
    if box.w0 > w or box.h0 > h or box.c0 > c:
        raise ValidationError(
            f"box {box.shape} exceeds volume dims {(w, h, c)} along some axis"
        )
    lo = cloud.mu.min(axis=0)
    hi = cloud.mu.max(axis=0)
    if (lo < 0).any() or (hi >= np.array([w, h, c])).any():
        warnings.warn(
            "Gaussian centers outside the volume; their out-of-bounds "
            "contributions are clipped",
            RuntimeWarning,
            stacklevel=3,
        )
    return w, h, c


def _n_chunks(deterministic: bool) -> int:
    return _kernels.DETERMINISTIC_CHUNKS if deterministic else max(
        1, get_num_threads()
    )


def reconstruct(
    cloud: GaussianCloud,
    box: BoxConfig,
    dims,
    deterministic: bool = False,
) -> VolumeGrid:
    """Splat the cloud onto a zero-initialized (w, h, c) grid.

    Contributions land at floor(mu) + b for every box offset b inside the
    volume; out-of-volume targets are dropped.  With ``deterministic`` the
    chunked reduction uses a fixed chunk count, making the output bitwise
    reproducible regardless of thread settings.
    """
    w, h, c = _check_args(cloud, box, dims)
    hx, hy, hz = box.half
    bufs = np.zeros((_n_chunks(deterministic), c, h, w), dtype=np.float64)
    _kernels.splat_decomposed(
        cloud.mu, cloud.sigma, cloud.intensity, hx, hy, hz, w, h, c, bufs
    )
    return VolumeGrid.from_zyx(bufs.sum(axis=0))


def reconstruct_nodecomp(
    cloud: GaussianCloud,
    box: BoxConfig,
    dims,
    deterministic: bool = False,
) -> VolumeGrid:
    """Splat via materialized shifted boxes, without the expansion.

    Same clipping and accumulation semantics as :func:`reconstruct`; slower
    because every box voxel pays for the full distance and its own
    exponential.
    """
    w, h, c = _check_args(cloud, box, dims)
    ws = FvrWorkspace.create(box)
    hx, hy, hz = box.half
    bufs = np.zeros((_n_chunks(deterministic), c, h, w), dtype=np.float64)
    _kernels.splat_plain(
        cloud.mu, cloud.sigma, cloud.intensity, ws.offset_grid.offsets,
        hx, hy, hz, w, h, c, bufs,
    )
    return VolumeGrid.from_zyx(bufs.sum(axis=0))


def reconstruct_direct(
    cloud: GaussianCloud,
    dims,
    budget: int = DEFAULT_DENSE_BUDGET,
) -> VolumeGrid:
    """Unconfined dense sum over every voxel; brute-force oracle.

    Evaluates every Gaussian at every voxel with no box truncation and no
    clipping.  Refuses when N * w * h * c exceeds ``budget``.
    """
    require_valid_cloud(cloud)
    w, h, c = (int(v) for v in dims)
    n = cloud.n
    if n * w * h * c > budget:
        raise DenseBudgetError(
            f"dense evaluation needs {n * w * h * c} element visits, over the "
            f"budget of {budget}"
        )
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    zs = np.arange(c, dtype=np.float64)
    out = np.zeros((c, h, w), dtype=np.float64)
    for i in range(n):
        mx, my, mz = cloud.mu[i]
        inv2 = 0.5 / cloud.sigma[i] ** 2
        d2 = (
            ((zs - mz) ** 2)[:, None, None]
            + ((ys - my) ** 2)[None, :, None]
            + ((xs - mx) ** 2)[None, None, :]
        )
        out += cloud.intensity[i] * np.exp(-inv2 * d2)
    return VolumeGrid.from_zyx(out)


def backward(
    cloud: GaussianCloud,
    box: BoxConfig,
    dims,
    dl_dvol: VolumeGrid,
    prev: ParamGradients | None = None,
) -> ParamGradients:
    """Analytic adjoint of :func:`reconstruct`.

    For upstream u at voxel floor(mu)+b, residual r = b - dmu and
    g = exp(-|r|^2 / (2 sigma^2)):

        dL/dI     += u * g
        dL/dmu    += u * g * I * r / sigma^2
        dL/dsigma += u * g * I * |r|^2 / sigma^3

    The floor is treated as locally constant so the gradient flows through
    the residual.  Positional gradient norms are added to the running
    densification statistics carried in ``prev``.
    """
    w, h, c = _check_args(cloud, box, dims)
    if tuple(dl_dvol.dims) != (w, h, c):
        raise ValidationError(
            f"upstream gradient dims {dl_dvol.dims} != volume dims {(w, h, c)}"
        )
    n = cloud.n
    if prev is not None and prev.d_mu.shape[0] != n:
        raise ValidationError(
            f"carried gradient stats have N = {prev.d_mu.shape[0]}, cloud has {n}"
        )
    hx, hy, hz = box.half
    d_mu = np.zeros((n, 3), dtype=np.float64)
    d_sigma = np.zeros(n, dtype=np.float64)
    d_intensity = np.zeros(n, dtype=np.float64)
    upstream = dl_dvol.zyx.astype(np.float64)
    _kernels.splat_backward(
        cloud.mu, cloud.sigma, cloud.intensity, hx, hy, hz, w, h, c,
        upstream, d_mu, d_sigma, d_intensity,
    )
    pos_norm = np.sqrt((d_mu * d_mu).sum(axis=1))
    if prev is None:
        accum = pos_norm
        iters = 1
    else:
        accum = prev.accum_pos_grad_norm + pos_norm
        iters = prev.iters_since_densify + 1
    return ParamGradients(d_mu, d_sigma, d_intensity, accum, iters)
