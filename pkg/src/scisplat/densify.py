"""Densification strategies.

The default MCMC-style strategy never changes the number of visible
"splats" abruptly: when ``k`` copies join a Gaussian, all ``k + 1`` share an
opacity chosen so their stacked alpha equals the original one, and their
scales shrink so the integrated footprint is preserved. The clone/split
strategy (adaptive density control) is kept only as an ablation baseline.
"""

from __future__ import annotations

from math import comb

import numpy as np

from .gaussians import GaussianCloud, logit, quat_to_rotmat, sigmoid

MIN_OPACITY = 0.005
MAX_REPLICAS = 51
_EPS32 = float(np.finfo(np.float32).eps)


def relocation_opacity_scale(opacity: np.ndarray, scale: np.ndarray, n_copies: np.ndarray):
    """Opacity and scale for each of ``n_copies`` replicas of a Gaussian.

    ``1 - (1 - o_new)^n == o`` so the stacked peak alpha is unchanged; the scale
    factor matches the integrated alpha of the replicas to the original's.
    """
    n = np.clip(np.asarray(n_copies, dtype=np.int64), 1, MAX_REPLICAS - 1)
    new_o = 1.0 - (1.0 - opacity) ** (1.0 / n)
    denom = np.zeros_like(new_o)
    for idx in np.ndindex(new_o.shape):
        total = 0.0
        for i in range(1, int(n[idx]) + 1):
            for k in range(i):
                total += comb(i - 1, k) * (-1) ** k * new_o[idx] ** (k + 1) / np.sqrt(k + 1)
        denom[idx] = total
    new_scale = (opacity / denom)[..., None] * scale
    new_o = np.clip(new_o, MIN_OPACITY, 1.0 - _EPS32)
    return new_o, new_scale


def _sample(rng: np.random.Generator, weights: np.ndarray, num: int, candidates: np.ndarray):
    p = weights / weights.sum()
    picks = candidates[rng.choice(len(candidates), size=num, replace=True, p=p)]
    counts = np.bincount(picks, minlength=int(candidates.max()) + 1)
    return picks, counts


def _replicate(cloud: GaussianCloud, sources: np.ndarray, counts: np.ndarray):
    """Update the sources in place; return (opacity_logit, log_scale) for the copies."""
    o = sigmoid(cloud.opacity_logits[sources])
    s = np.exp(cloud.log_scales[sources])
    new_o, new_s = relocation_opacity_scale(o, s, counts[sources] + 1)
    o_logit, log_s = logit(new_o), np.log(new_s)
    cloud.opacity_logits[sources] = o_logit
    cloud.log_scales[sources] = log_s
    return o_logit, log_s


def relocate_dead(cloud: GaussianCloud, rng: np.random.Generator, dead_threshold: float = MIN_OPACITY):
    """Move Gaussians with opacity below the threshold onto live ones.

    Returns the indices whose parameters changed (for optimizer resets).
    """
    o = cloud.opacities
    dead = np.flatnonzero(o < dead_threshold)
    alive = np.flatnonzero(o >= dead_threshold)
    if len(dead) == 0 or len(alive) == 0:
        return np.zeros(0, dtype=np.int64)
    picks, counts = _sample(rng, o[alive], len(dead), alive)
    o_logit, log_s = _replicate(cloud, picks, counts)
    cloud.means[dead] = cloud.means[picks]
    cloud.quats[dead] = cloud.quats[picks]
    cloud.color_logits[dead] = cloud.color_logits[picks]
    cloud.opacity_logits[dead] = o_logit
    cloud.log_scales[dead] = log_s
    cloud.touch()
    return np.union1d(dead, picks)


def grow(cloud: GaussianCloud, rng: np.random.Generator, cap: int, fraction: float = 0.05):
    """Add up to ``fraction`` new Gaussians, sampled by opacity, without exceeding ``cap``.

    Returns ``(new_cloud, changed_source_indices, n_added)``.
    """
    m = len(cloud)
    target = min(cap, int(np.floor((1.0 + fraction) * m)))
    n_new = max(0, target - m)
    if n_new == 0:
        return cloud, np.zeros(0, dtype=np.int64), 0
    o = cloud.opacities
    picks, counts = _sample(rng, o, n_new, np.arange(m))
    o_logit, log_s = _replicate(cloud, picks, counts)
    extra = cloud.subset(picks)
    extra.opacity_logits = o_logit
    extra.log_scales = log_s
    return cloud.concat(extra), np.unique(picks), n_new


def _op_gate(x: np.ndarray, k: float = 100.0, x0: float = 0.995) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-k * (x - x0)))


def perturb_positions(cloud: GaussianCloud, rng: np.random.Generator, lr_means: float, noise_lr: float) -> None:
    """Covariance-shaped position noise, gated to nearly transparent Gaussians."""
    if noise_lr <= 0 or len(cloud) == 0:
        return
    rot = quat_to_rotmat(cloud.quats)
    m = rot * np.exp(cloud.log_scales)[:, None, :]
    cov = m @ np.swapaxes(m, 1, 2)
    gate = _op_gate(1.0 - cloud.opacities) * noise_lr * lr_means
    noise = np.einsum("nij,nj->ni", cov, rng.standard_normal((len(cloud), 3)))
    cloud.means += noise * gate[:, None]
    cloud.touch()


def adc_densify(
    cloud: GaussianCloud,
    grad_accum: np.ndarray,
    denom: np.ndarray,
    rng: np.random.Generator,
    grad_threshold: float,
    scene_extent: float,
    cap: int,
    percent_dense: float = 0.01,
    min_opacity: float = MIN_OPACITY,
) -> tuple[GaussianCloud, np.ndarray, np.ndarray]:
    """Clone small / split large Gaussians with high view-space gradient, prune transparent ones.

    Returns the new cloud, the index each Gaussian came from, and a flag
    marking the clones and split halves (whose optimizer state starts fresh).
    """
    avg = np.where(denom > 0, grad_accum / np.maximum(denom, 1), 0.0)
    hot = avg >= grad_threshold
    big = np.exp(cloud.log_scales).max(axis=1) > percent_dense * scene_extent
    headroom = max(0, cap - len(cloud))
    clone_idx = np.flatnonzero(hot & ~big)[:headroom]
    headroom -= len(clone_idx)
    split_idx = np.flatnonzero(hot & big)[:headroom]

    clones = cloud.subset(clone_idx)
    # each split Gaussian becomes two samples from its own distribution, 1.6x smaller
    halves = []
    for _ in range(2):
        part = cloud.subset(split_idx)
        if len(split_idx):
            rot = quat_to_rotmat(part.quats)
            local = rng.standard_normal((len(split_idx), 3)) * np.exp(part.log_scales)
            part.means = part.means + np.einsum("nij,nj->ni", rot, local)
            part.log_scales = part.log_scales - np.log(1.6)
        halves.append(part)

    keep = np.ones(len(cloud), dtype=bool)
    keep[split_idx] = False
    origin = np.concatenate([np.flatnonzero(keep), clone_idx, split_idx, split_idx])
    is_new = np.arange(len(origin)) >= np.count_nonzero(keep)
    out = cloud.subset(np.flatnonzero(keep)).concat(clones).concat(halves[0]).concat(halves[1])
    alive = out.opacities >= min_opacity
    if not alive.all() and alive.any():
        out = out.subset(np.flatnonzero(alive))
        origin = origin[alive]
        is_new = is_new[alive]
    out.revision = cloud.revision + 1
    return out, origin, is_new
