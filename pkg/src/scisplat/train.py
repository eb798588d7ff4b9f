"""Joint optimization of a Gaussian cloud and per-frame camera poses against
a single SCI measurement."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import se3_exp
from .densify import MIN_OPACITY, adc_densify, grow, perturb_positions, relocate_dead
from .errors import Diverged, ShapeMismatch, ValidationError
from .gaussians import PARAM_GROUPS, GaussianCloud
from .grad import CloudGradients, backward
from .init_protocol import PoseSet
from .losses import (
    measurement_loss,
    regularizers,
    renders_grad_from_measurement,
    synthesize_from_renders,
)
from .render import render_views
from .sci_forward import MaskStack, Measurement

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    iterations: int = 3000
    max_gaussians: int = 100_000
    loss_mode: str = "l1_dssim"
    lambda_dssim: float = 0.2
    lambda_o: float = 1e-4
    lambda_s: float = 1e-4
    # base Gaussian rates; multiplied by sqrt(N_I) when sqrt_batch_scaling is set
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    spatial_scale: float = 1.0
    sqrt_batch_scaling: bool = True
    optimize_poses: bool = True
    pose_lr_start: float = 5e-4
    pose_lr_end: float = 2.5e-7
    densify: str = "mcmc"  # mcmc | adc | none
    densify_from: int = 500
    densify_until: int = 2500
    densify_interval: int = 100
    dead_opacity: float = MIN_OPACITY
    growth_fraction: float = 0.05
    noise_lr: float = 5e5
    adc_grad_threshold: float = 2e-4
    adc_percent_dense: float = 0.01
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValidationError("lambda_dssim must be in [0, 1]")
        rates = [self.lr_means, self.lr_means_final, self.lr_log_scales, self.lr_quats, self.lr_opacity,
                 self.lr_color, self.pose_lr_start, self.pose_lr_end]
        if min(rates) <= 0:
            raise ValidationError("learning rates must be positive")
        if self.loss_mode not in ("l1_dssim", "mse"):
            raise ValidationError(f"unknown loss mode {self.loss_mode!r}")
        if self.densify not in ("mcmc", "adc", "none"):
            raise ValidationError(f"unknown densification strategy {self.densify!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def exp_schedule(start: float, end: float, iteration: int, total: int) -> float:
    """Log-linear decay from ``start`` (first iteration) to ``end`` (last)."""
    if total <= 1:
        return start
    t = min(max(iteration / (total - 1), 0.0), 1.0)
    return math.exp((1 - t) * math.log(start) + t * math.log(end))


@dataclass
class TrainState:
    cloud: GaussianCloud
    poses: PoseSet
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    pose_m: np.ndarray | None = None
    pose_v: np.ndarray | None = None
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    loss_history: list = field(default_factory=list)
    densify_log: list = field(default_factory=list)
    # view-space gradient statistics for the clone/split ablation
    grad_accum: np.ndarray | None = None
    grad_denom: np.ndarray | None = None

    @classmethod
    def create(cls, cloud: GaussianCloud, poses: PoseSet, seed: int = 0) -> "TrainState":
        state = cls(cloud=cloud, poses=poses, rng=np.random.default_rng(seed))
        state.reset_moments()
        return state

    def reset_moments(self) -> None:
        self.m = {k: np.zeros_like(v) for k, v in self.cloud.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in self.cloud.params().items()}
        self.pose_m = np.zeros((len(self.poses), 6))
        self.pose_v = np.zeros((len(self.poses), 6))
        self.grad_accum = np.zeros(len(self.cloud))
        self.grad_denom = np.zeros(len(self.cloud))

    def zero_moments(self, idx) -> None:
        for k in PARAM_GROUPS:
            self.m[k][idx] = 0.0
            self.v[k][idx] = 0.0

    def remap(self, origin: np.ndarray, reset: np.ndarray | None = None) -> None:
        """Re-index per-Gaussian state after the cloud was rebuilt.

        ``origin[j]`` is the old index of new Gaussian ``j`` (-1 = fresh).
        """
        fresh = origin < 0
        src = np.where(fresh, 0, origin)
        for k in PARAM_GROUPS:
            for store in (self.m, self.v):
                arr = store[k][src] if len(store[k]) else np.zeros((len(src),) + store[k].shape[1:])
                arr[fresh] = 0.0
                store[k] = arr
        self.grad_accum = np.zeros(len(origin))
        self.grad_denom = np.zeros(len(origin))
        if reset is not None:
            self.zero_moments(reset)


def gaussian_rates(config: TrainConfig, iteration: int, n_frames: int) -> dict[str, float]:
    mult = math.sqrt(n_frames) if config.sqrt_batch_scaling else 1.0
    lr_means = exp_schedule(config.lr_means, config.lr_means_final, iteration, config.iterations)
    return {
        "means": lr_means * config.spatial_scale * mult,
        "log_scales": config.lr_log_scales * mult,
        "quats": config.lr_quats * mult,
        "opacity_logits": config.lr_opacity * mult,
        "color_logits": config.lr_color * mult,
    }


def pose_rate(config: TrainConfig, iteration: int) -> float:
    return exp_schedule(config.pose_lr_start, config.pose_lr_end, iteration, config.iterations)


def _adam_update(param, grad, m, v, lr, t):
    m *= BETA1
    m += (1 - BETA1) * grad
    v *= BETA2
    v += (1 - BETA2) * grad * grad
    m_hat = m / (1 - BETA1**t)
    v_hat = v / (1 - BETA2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def adam_step(
    state: TrainState,
    grads: CloudGradients,
    pose_grads: np.ndarray | None,
    config: TrainConfig,
    n_frames: int,
) -> TrainState:
    """One Adam update of every Gaussian group and, if enabled, of the poses.

    Pose updates are left-applied twists: ``T <- exp(delta) @ T``.
    """
    t = state.iteration + 1
    rates = gaussian_rates(config, state.iteration, n_frames)
    cloud = state.cloud
    for name in PARAM_GROUPS:
        g = getattr(grads, name)
        if g.shape != getattr(cloud, name).shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}")
        setattr(cloud, name, _adam_update(getattr(cloud, name), g, state.m[name], state.v[name], rates[name], t))
    cloud.normalize_quats()
    cloud.touch()
    if config.optimize_poses and pose_grads is not None:
        lr = pose_rate(config, state.iteration)
        zero = np.zeros_like(pose_grads)
        delta = _adam_update(zero, pose_grads, state.pose_m, state.pose_v, lr, t)
        state.poses = PoseSet(
            [se3_exp(d) @ p for d, p in zip(delta, state.poses.poses)], state.poses.intrinsics
        )
    return state


def mcmc_densify(state: TrainState, config: TrainConfig) -> TrainState:
    """Relocate dead Gaussians, then grow by ``growth_fraction`` up to the cap."""
    before = len(state.cloud)
    relocated = relocate_dead(state.cloud, state.rng, config.dead_opacity)
    state.zero_moments(relocated)
    cloud, sources, n_added = grow(state.cloud, state.rng, config.max_gaussians, config.growth_fraction)
    origin = np.concatenate([np.arange(before), -np.ones(n_added, dtype=np.int64)])
    state.cloud = cloud
    state.remap(origin, reset=sources)
    state.densify_log.append(
        {"iteration": state.iteration, "relocated": int(len(relocated)), "added": int(n_added), "count": len(cloud)}
    )
    return state


def _adc_step(state: TrainState, config: TrainConfig, extent: float) -> TrainState:
    cloud, origin, is_new = adc_densify(
        state.cloud, state.grad_accum, state.grad_denom, state.rng,
        config.adc_grad_threshold, extent, config.max_gaussians, config.adc_percent_dense,
    )
    before = len(state.cloud)
    state.cloud = cloud
    # clones and split halves start with fresh moments
    state.remap(origin, reset=np.flatnonzero(is_new))
    state.densify_log.append({"iteration": state.iteration, "added": len(cloud) - before, "count": len(cloud)})
    return state


def scene_extent(cloud: GaussianCloud) -> float:
    if len(cloud) < 2:
        return 1.0
    center = cloud.means.mean(axis=0)
    return float(np.linalg.norm(cloud.means - center, axis=1).max() * 1.1)


def train_step(state: TrainState, y: Measurement, masks: MaskStack, config: TrainConfig, h: int, w: int):
    """Render, compare against the measurement, backpropagate, update."""
    n = masks.n_frames
    k = state.poses.intrinsics
    frames, auxes = render_views(state.cloud, state.poses.poses, k, h, w, config.threads)
    y_hat = synthesize_from_renders(frames, masks)
    loss, g_y = measurement_loss(y_hat, y, config.loss_mode, config.lambda_dssim, scale=1.0 / n)
    reg, g_op, g_ls = regularizers(state.cloud, config.lambda_o, config.lambda_s)
    total = loss + reg
    if not math.isfinite(total):
        raise Diverged(f"loss became {total} at iteration {state.iteration}")
    upstream = renders_grad_from_measurement(g_y, masks)
    grads, pose_grads = backward(state.cloud, auxes, upstream)
    grads.opacity_logits += g_op
    grads.log_scales += g_ls
    if not grads.is_finite() or not np.isfinite(pose_grads).all():
        raise Diverged(f"non-finite gradient at iteration {state.iteration}")
    state.grad_accum += grads.screen_grad
    state.grad_denom += grads.counts > 0
    adam_step(state, grads, pose_grads, config, n)
    lr_means = gaussian_rates(config, state.iteration, n)["means"]
    if config.densify == "mcmc":
        perturb_positions(state.cloud, state.rng, lr_means, config.noise_lr)
    state.loss_history.append(total)
    state.iteration += 1
    return state, loss


def train(
    measurement: Measurement,
    masks: MaskStack,
    cloud: GaussianCloud,
    poses: PoseSet,
    config: TrainConfig,
    height: int | None = None,
    width: int | None = None,
    callback=None,
    densify_probe=None,
) -> TrainState:
    """Full optimization loop; returns the final state with its loss history.

    ``callback(state)`` runs after every iteration. ``densify_probe(before,
    after)`` receives the clouds around every densification event.
    """
    if len(cloud) == 0:
        raise ValidationError("initial cloud is empty")
    if len(poses) != masks.n_frames:
        raise ShapeMismatch(f"{len(poses)} poses for {masks.n_frames} masks")
    h, w = masks.shape
    if (height, width) not in ((None, None), (h, w)):
        raise ShapeMismatch("image size disagrees with masks")
    state = TrainState.create(cloud.copy(), poses.copy(), config.seed)
    extent = scene_extent(cloud)
    start = time.perf_counter()
    for it in range(config.iterations):
        state, loss = train_step(state, measurement, masks, config, h, w)
        due = (
            config.densify != "none"
            and config.densify_from <= state.iteration <= config.densify_until
            and state.iteration % config.densify_interval == 0
        )
        if due:
            before = state.cloud.copy() if densify_probe else None
            if config.densify == "mcmc":
                mcmc_densify(state, config)
            else:
                _adc_step(state, config, extent)
            if densify_probe:
                densify_probe(before, state.cloud.copy(), state.poses)
        if callback:
            callback(state)
        if it % 500 == 0:
            log.info("it %d loss %.6f gaussians %d (%.1fs)", it, loss, len(state.cloud), time.perf_counter() - start)
    return state
