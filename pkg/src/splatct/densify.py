"""Adaptive density control: clone, split, prune.

Every densification event works from the average positional gradient norm
accumulated since the previous event.  Gaussians with a large average
gradient are under-converged: small ones (sigma <= theta) are cloned with
their intensity halved across both copies, large ones are split into two
children sampled from the parent's own density with the standard deviation
divided by cbrt(2).  Gaussians whose average gradient fell to or below the
threshold, or whose sigma outgrew three times the box size, are pruned.
Masks are evaluated on the incoming cloud's statistics, so Gaussians
created by the event itself are never pruned by it.  The total count never
exceeds ``n_max``; clone and split budgets pick the highest-gradient
candidates first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianCloud, ParamGradients, ValidationError

__all__ = ["CBRT2", "DensifyParams", "DensifyReport", "densify_and_prune"]

# Single shared constant so "sigma divided by cbrt(2)" is bit-identical
# everywhere it is checked.
CBRT2 = float(np.cbrt(2.0))


@dataclass(frozen=True)
class DensifyParams:
    """Thresholds and budget for one densification event."""

    n_max: int = 500_000
    tau: float = 2e-4
    theta: float = 1.0
    box_size: int = 17
    interval: int = 100
    grad_prune_enabled: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.theta <= 0:
            raise ValidationError(f"theta must be positive, got {self.theta}")
        if self.n_max < 1:
            raise ValidationError(f"n_max must be >= 1, got {self.n_max}")

    @classmethod
    def for_volume(cls, dims, box_size: int = 17, **kw) -> "DensifyParams":
        """Default theta: 0.005 of the volume's voxel-space body diagonal."""
        w, h, c = (int(v) for v in dims)
        theta = 0.005 * float(np.sqrt(w * w + h * h + c * c))
        return cls(theta=theta, box_size=box_size, **kw)


@dataclass(frozen=True)
class DensifyReport:
    """What one event did, plus the bookkeeping the optimizer needs.

    ``kept`` indexes the surviving originals in the old cloud; the new
    cloud is [originals[kept], clone copies, split children] in that order.
    """

    clones: int
    splits: int
    prunes: int
    n_after: int
    kept: np.ndarray


def _top_k(mask: np.ndarray, score: np.ndarray, k: int) -> np.ndarray:
    """Restrict a candidate mask to its k highest-score members."""
    if k <= 0:
        return np.zeros_like(mask)
    idx = np.nonzero(mask)[0]
    if idx.size <= k:
        return mask
    keep = idx[np.argsort(score[idx])[::-1][:k]]
    out = np.zeros_like(mask)
    out[keep] = True
    return out


def densify_and_prune(
    cloud: GaussianCloud,
    grads: ParamGradients,
    params: DensifyParams,
    rng: np.random.Generator,
) -> tuple[GaussianCloud, DensifyReport]:
    """One clone/split/prune event; returns a fresh cloud and its report."""
    n = cloud.n
    if grads.iters_since_densify <= 0:
        raise ValidationError("no backward passes accumulated since last event")
    if grads.accum_pos_grad_norm.shape[0] != n:
        raise ValidationError("gradient statistics do not match the cloud")
    avg = grads.accum_pos_grad_norm / grads.iters_since_densify
    sigma = cloud.sigma
    prune_mask = sigma > 3.0 * params.box_size
    if params.grad_prune_enabled:
        prune_mask = prune_mask | (avg <= params.tau)
    # a Gaussian marked for pruning never clones or splits
    hot = (avg >= params.tau) & ~prune_mask

    clone_mask = hot & (sigma <= params.theta)
    budget = params.n_max - n
    clone_mask = _top_k(clone_mask, avg, min(budget, int(clone_mask.sum())))
    n_clone = int(clone_mask.sum())

    split_mask = hot & (sigma > params.theta)
    budget = params.n_max - n - n_clone  # each split nets +1
    split_mask = _top_k(split_mask, avg, min(budget, int(split_mask.sum())))
    n_split = int(split_mask.sum())

    intensity = cloud.intensity.copy()
    intensity[clone_mask] *= 0.5  # halved on parent and copy alike

    kept = np.nonzero(~(prune_mask | split_mask))[0]
    mu_parts = [cloud.mu[kept], cloud.mu[clone_mask]]
    sg_parts = [sigma[kept], sigma[clone_mask]]
    it_parts = [intensity[kept], intensity[clone_mask]]

    if n_split:
        pm = cloud.mu[split_mask]
        ps = sigma[split_mask]
        pi = cloud.intensity[split_mask]
        children_mu = np.repeat(pm, 2, axis=0) + rng.standard_normal(
            (2 * n_split, 3)
        ) * np.repeat(ps, 2)[:, None]
        mu_parts.append(children_mu)
        sg_parts.append(np.repeat(ps / CBRT2, 2))
        it_parts.append(np.repeat(pi, 2))

    new_cloud = GaussianCloud(
        np.concatenate(mu_parts, axis=0),
        np.concatenate(sg_parts),
        np.concatenate(it_parts),
    )
    report = DensifyReport(
        clones=n_clone,
        splits=n_split,
        prunes=int(prune_mask.sum()),
        n_after=new_cloud.n,
        kept=kept,
    )
    return new_cloud, report
