"""Joint optimization of all Gaussian parameters.

Each iteration reconstructs the volume, projects it into the measurement
domain, evaluates the composite objective, pulls the gradient back through
the projector adjoint and the splat adjoint, and applies one Adam step to
every parameter at once.  Densification runs on a fixed interval.  The
learning rate decays exponentially from ``lr_initial`` to ``lr_final``
over the iteration budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import fvr, projector
from .core import (
    BoxConfig,
    GaussianCloud,
    ParamGradients,
    ScanGeometry,
    Sinogram,
    ValidationError,
    VolumeGrid,
)
from .densify import DensifyParams, DensifyReport, densify_and_prune
from .loss import LossWeights, ssim_value, total_loss_detailed
from .metrics import psnr as psnr_metric

__all__ = [
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "NonFiniteLossError",
    "OptimizerState",
    "ReconstructionSettings",
    "SIGMA_FLOOR",
    "TraceRow",
    "adam_step",
    "init_cloud_fbp",
    "init_cloud_random",
    "run_reconstruction",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SIGMA_FLOOR = 0.3


class NonFiniteLossError(RuntimeError):
    """Loss became NaN/Inf; carries a diagnostic snapshot of the iteration."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class OptimizerState:
    """Adam moment accumulators matching the cloud layout, plus schedule."""

    m_mu: np.ndarray
    v_mu: np.ndarray
    m_sigma: np.ndarray
    v_sigma: np.ndarray
    m_intensity: np.ndarray
    v_intensity: np.ndarray
    step: int
    lr_initial: float = 3e-4
    lr_final: float = 3e-5
    max_iters: int = 1000

    @classmethod
    def fresh(cls, n: int, lr_initial=3e-4, lr_final=3e-5, max_iters=1000):
        z = np.zeros
        return cls(
            z((n, 3)), z((n, 3)), z(n), z(n), z(n), z(n), 0,
            lr_initial, lr_final, max_iters,
        )

    @property
    def n(self) -> int:
        return self.m_sigma.shape[0]

    def lr(self) -> float:
        t = min(self.step, self.max_iters) / max(self.max_iters, 1)
        return self.lr_initial * (self.lr_final / self.lr_initial) ** t

    def remap(self, report: DensifyReport) -> "OptimizerState":
        """Carry moments of surviving Gaussians; new entries start at zero."""
        kept = report.kept
        extra = report.n_after - kept.size

        def grow(a: np.ndarray) -> np.ndarray:
            tail_shape = (extra,) + a.shape[1:]
            return np.concatenate([a[kept], np.zeros(tail_shape)], axis=0)

        return replace(
            self,
            m_mu=grow(self.m_mu), v_mu=grow(self.v_mu),
            m_sigma=grow(self.m_sigma), v_sigma=grow(self.v_sigma),
            m_intensity=grow(self.m_intensity), v_intensity=grow(self.v_intensity),
        )


def adam_step(
    cloud: GaussianCloud,
    grads: ParamGradients,
    state: OptimizerState,
    sigma_ceiling: float,
) -> tuple[GaussianCloud, OptimizerState]:
    """One bias-corrected Adam update on mu, sigma and intensity.

    After the update sigma is clamped to [SIGMA_FLOOR, sigma_ceiling] and
    intensity to >= 0.
    """
    if grads.d_mu.shape[0] != cloud.n or state.n != cloud.n:
        raise ValidationError("cloud, gradients and optimizer state disagree on N")
    t = state.step + 1
    lr = state.lr()
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t

    def update(param, g, m, v):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        return param - step, m, v

    mu, m_mu, v_mu = update(cloud.mu, grads.d_mu, state.m_mu, state.v_mu)
    sigma, m_s, v_s = update(cloud.sigma, grads.d_sigma, state.m_sigma, state.v_sigma)
    inten, m_i, v_i = update(
        cloud.intensity, grads.d_intensity, state.m_intensity, state.v_intensity
    )
    sigma = np.clip(sigma, SIGMA_FLOOR, sigma_ceiling)
    inten = np.maximum(inten, 0.0)
    new_state = replace(
        state, m_mu=m_mu, v_mu=v_mu, m_sigma=m_s, v_sigma=v_s,
        m_intensity=m_i, v_intensity=v_i, step=t,
    )
    return GaussianCloud(mu, sigma, inten), new_state


def _axis_mass(box: BoxConfig, dmu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Expected splatted mass per Gaussian: product of per-axis tap sums."""
    mass = np.ones_like(sigma)
    inv2 = 0.5 / sigma**2
    for axis, half in enumerate(box.half):
        taps = np.arange(-half, half + 1, dtype=np.float64)
        r = taps[None, :] - dmu[:, axis : axis + 1]
        mass *= np.exp(-inv2[:, None] * r * r).sum(axis=1)
    return mass


def init_cloud_fbp(
    fbp_vol: VolumeGrid,
    n: int = 150_000,
    seed: int = 0,
    sigma0: float = 1.5,
    box: BoxConfig | None = None,
) -> GaussianCloud:
    """Sample centers proportionally to the clamped FBP volume.

    Centers are jittered uniformly inside their voxel; sigma starts at
    ``sigma0``; intensities take the sampled voxel's clamped FBP value,
    scaled so the initial splatted mass approximates the FBP mass.  Falls
    back to uniform sampling (with a warning via the returned weights being
    flat) when the FBP volume is entirely non-positive.
    """
    if n < 1:
        raise ValidationError(f"need n >= 1 Gaussians, got {n}")
    rng = np.random.default_rng(seed)
    w, h, c = fbp_vol.dims
    weights = np.maximum(fbp_vol.data.astype(np.float64), 0.0)
    total = weights.sum()
    if total <= 0 or not np.isfinite(total):
        import warnings

        warnings.warn(
            "FBP volume has no positive mass; falling back to uniform sampling",
            RuntimeWarning,
        )
        weights = np.ones_like(weights)
        total = weights.sum()
    flat = rng.choice(weights.size, size=n, p=weights / total)
    z, rem = np.divmod(flat, w * h)
    y, x = np.divmod(rem, w)
    mu = np.stack([x, y, z], axis=1).astype(np.float64) + rng.uniform(
        0.0, 1.0, (n, 3)
    )
    sigma = np.full(n, float(sigma0))
    base = np.maximum(weights[flat], 1e-12)
    if box is None:
        box = BoxConfig.for_dims(17, (w, h, c))
    mass = _axis_mass(box, mu - np.floor(mu), sigma)
    scale = total / float((base * mass).sum())
    return GaussianCloud(mu, sigma, base * scale)


def init_cloud_random(
    dims, n: int, seed: int = 0, box: BoxConfig | None = None,
    sigma0: float = 1.5, intensity0: float = 1e-3,
) -> GaussianCloud:
    """Uniform centers in the volume interior (margin of half a box)."""
    if n < 1:
        raise ValidationError(f"need n >= 1 Gaussians, got {n}")
    w, h, c = (int(v) for v in dims)
    if box is None:
        box = BoxConfig.for_dims(17, (w, h, c))
    rng = np.random.default_rng(seed)
    lo = np.array([min(hf, d / 2) for hf, d in zip(box.half, (w, h, c))], dtype=float)
    hi = np.array([w, h, c], dtype=float) - lo
    mu = rng.uniform(lo, hi, (n, 3))
    return GaussianCloud(mu, np.full(n, sigma0), np.full(n, intensity0))


@dataclass(frozen=True)
class ReconstructionSettings:
    """Everything the optimization loop needs besides the measurements."""

    dims: tuple[int, int, int]
    box: BoxConfig
    weights: LossWeights = LossWeights()
    max_iters: int = 1000
    lr_initial: float = 3e-4
    lr_final: float = 3e-5
    densify: DensifyParams | None = None
    densify_interval: int = 100
    init_mode: str = "fbp"  # "fbp" | "random"
    n_gaussians: int = 150_000
    seed: int = 0
    deterministic: bool = False
    stop_rule: str = "iters"  # "iters" | "val-convergence"
    holdout_fraction: float = 0.1
    patience: int = 100
    fbp_filter: str = "ramp"


@dataclass
class TraceRow:
    iteration: int
    loss: float
    loss_l1: float
    loss_ssim: float
    loss_tv: float
    psnr: float
    ssim: float
    n_gaussians: int
    wall_seconds: float
    clones: int = 0
    splits: int = 0
    prunes: int = 0
    val_loss: float = float("nan")


def _holdout_split(geom: ScanGeometry, measured: Sinogram, fraction: float):
    """Deterministically hold out a fraction of views for the stop rule."""
    m = geom.n_views
    k = max(1, int(round(m * fraction)))
    stride = max(2, m // k)
    hold = np.zeros(m, dtype=bool)
    hold[stride // 2 :: stride] = True
    if hold.all():
        hold[0] = False
    train_idx = np.nonzero(~hold)[0]
    val_idx = np.nonzero(hold)[0]

    def subset(idx):
        g = ScanGeometry(
            geom.variant, idx.size, geom.n_detectors, geom.detector_spacing,
            geom.view_angles[idx], geom.source_to_origin, geom.origin_to_detector,
        )
        s = Sinogram.from_views(measured.views[idx])
        return g, s

    return subset(train_idx), subset(val_idx)


def _evaluate(pred: Sinogram, ref: Sinogram) -> float:
    return float(np.mean(np.abs(pred.views - ref.views)))


def run_reconstruction(
    measured: Sinogram,
    geom: ScanGeometry,
    settings: ReconstructionSettings,
    truth: VolumeGrid | None = None,
    init_cloud: GaussianCloud | None = None,
    init_state: OptimizerState | None = None,
    init_grads: ParamGradients | None = None,
    start_iteration: int = 0,
) -> tuple[VolumeGrid, GaussianCloud, list[TraceRow]]:
    """Optimize the cloud against measured projections.

    Per iteration: splat, project, composite loss, adjoint back through
    projector and splat, Adam step; densify on the configured interval.
    With ``stop_rule="val-convergence"`` a held-out view subset is tracked
    and the loop stops once its loss stops improving for ``patience``
    iterations.  A non-finite loss aborts with a diagnostic snapshot.
    The ``init_*`` arguments allow resuming from a saved snapshot.
    """
    dims = settings.dims
    box = settings.box
    geom.check_volume(dims)
    if measured.dims[2] != dims[2]:
        raise ValidationError(
            f"measured sinogram has {measured.dims[2]} slices, volume {dims[2]}"
        )

    if settings.stop_rule == "val-convergence":
        (geom_tr, sino_tr), (geom_val, sino_val) = _holdout_split(
            geom, measured, settings.holdout_fraction
        )
    elif settings.stop_rule == "iters":
        geom_tr, sino_tr = geom, measured
        geom_val = sino_val = None
    else:
        raise ValidationError(f"unknown stop rule {settings.stop_rule!r}")

    if init_cloud is not None:
        cloud = init_cloud
    elif settings.init_mode == "fbp":
        baseline = projector.fbp(measured, geom, dims, settings.fbp_filter)
        cloud = init_cloud_fbp(
            baseline, settings.n_gaussians, settings.seed, box=box
        )
    elif settings.init_mode == "random":
        cloud = init_cloud_random(
            dims, settings.n_gaussians, settings.seed, box=box
        )
    else:
        raise ValidationError(f"unknown init mode {settings.init_mode!r}")

    state = init_state or OptimizerState.fresh(
        cloud.n, settings.lr_initial, settings.lr_final, settings.max_iters
    )
    densify_params = settings.densify or DensifyParams.for_volume(
        dims, box_size=box.extent
    )
    sigma_ceiling = 3.0 * box.extent
    grads_carry = init_grads
    trace: list[TraceRow] = []
    best_val = np.inf
    best_val_iter = start_iteration
    t_start = time.perf_counter()

    volume = fvr.reconstruct(cloud, box, dims, settings.deterministic)
    for it in range(start_iteration, settings.max_iters):
        pred = projector.forward_project(volume, geom_tr)
        value, g_pred, g_vol_tv, parts = total_loss_detailed(
            pred, sino_tr, volume, settings.weights
        )
        if not np.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite loss at iteration {it}",
                snapshot={
                    "iteration": it,
                    "loss": value,
                    "n_gaussians": cloud.n,
                    "sigma_range": (float(cloud.sigma.min()), float(cloud.sigma.max())),
                    "intensity_max": float(cloud.intensity.max()),
                },
            )
        data_grad = projector.back_project(
            Sinogram.from_views(g_pred), geom_tr, dims,
            deterministic=settings.deterministic,
        ).zyx.astype(np.float64)
        dl_dvol = VolumeGrid.from_zyx(data_grad + g_vol_tv)
        grads = fvr.backward(cloud, box, dims, dl_dvol, prev=grads_carry)
        grads_carry = grads
        cloud, state = adam_step(cloud, grads, state, sigma_ceiling)

        row = TraceRow(
            iteration=it + 1,
            loss=value,
            loss_l1=parts["l1"],
            loss_ssim=parts["ssim"],
            loss_tv=parts["tv"],
            psnr=float("nan"),
            ssim=float("nan"),
            n_gaussians=cloud.n,
            wall_seconds=time.perf_counter() - t_start,
        )

        densify_due = (
            settings.densify_interval > 0
            and (it + 1) % settings.densify_interval == 0
            and it + 1 < settings.max_iters
        )
        if densify_due:
            rng = np.random.default_rng([settings.seed, it + 1])
            cloud, report = densify_and_prune(cloud, grads_carry, densify_params, rng)
            state = state.remap(report)
            grads_carry = None
            row.clones = report.clones
            row.splits = report.splits
            row.prunes = report.prunes
            row.n_gaussians = cloud.n

        volume = fvr.reconstruct(cloud, box, dims, settings.deterministic)
        if truth is not None:
            row.psnr = psnr_metric(
                volume.zyx.astype(np.float64), truth.zyx.astype(np.float64)
            )
            row.ssim = float(
                np.mean(
                    [
                        ssim_value(a, b, float(truth.data.max()))
                        for a, b in zip(volume.zyx, truth.zyx)
                    ]
                )
            )
        if geom_val is not None:
            val = _evaluate(projector.forward_project(volume, geom_val), sino_val)
            row.val_loss = val
            if val < best_val - 1e-9:
                best_val = val
                best_val_iter = it + 1
            elif it + 1 - best_val_iter >= settings.patience:
                trace.append(row)
                break
        trace.append(row)

    return volume, cloud, trace
