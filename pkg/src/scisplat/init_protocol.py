"""Initialization from a single measurement.

The measurement is normalized by the mask sum, each frame keeps only the
pixels its (thresholded) mask sampled, and the holes are filled from the
nearest retained pixel. Points and poses come from an external SfM export,
a linear SE(3) trajectory, or perturbed ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Intrinsics, Pose, interpolate_pose, project_point, se3_exp
from .errors import BehindCamera, EmptySelection, ShapeMismatch, ValidationError
from .gaussians import GaussianCloud, logit
from .sci_forward import MaskStack, Measurement, normalize_measurement

INIT_OPACITY = 0.1
DEFAULT_POINTS = 10000


@dataclass
class DegradedFrame:
    image: np.ndarray  # (H, W, C)
    validity: np.ndarray  # (H, W) bool


@dataclass
class SparsePoints:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.positions):
                raise ShapeMismatch("one color per point required")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class PoseSet:
    poses: list[Pose]
    intrinsics: Intrinsics

    def __len__(self) -> int:
        return len(self.poses)

    def copy(self) -> "PoseSet":
        return PoseSet(list(self.poses), self.intrinsics)


def select_mask(mask_frame: np.ndarray, tau: float) -> np.ndarray:
    """Selection matrix: True where the mask value is at least ``tau``."""
    if not 0.0 < tau <= 1.0:
        raise ValidationError(f"tau must be in (0, 1], got {tau}")
    return np.asarray(mask_frame) >= tau


def fill_interpolate(sparse: np.ndarray, validity: np.ndarray) -> np.ndarray:
    """Fill invalid pixels from the nearest valid pixel.

    Distance is Euclidean in pixel units; among equidistant candidates the
    first in row-major order wins.
    """
    validity = np.asarray(validity, dtype=bool)
    if not validity.any():
        raise EmptySelection("no valid pixels to interpolate from")
    out = np.array(sparse, dtype=np.float64, copy=True)
    if validity.all():
        return out
    h, w = validity.shape
    src = np.argwhere(validity)  # row-major order
    dst = np.argwhere(~validity)
    tree = cKDTree(src)
    k = min(16, len(src))
    _, idx = tree.query(dst, k=k)
    idx = idx.reshape(len(dst), k)
    d2 = ((src[idx] - dst[:, None, :]) ** 2).sum(axis=2)  # exact integers
    best = d2.min(axis=1)
    # smallest row-major index among the exact ties
    cand = np.where(d2 == best[:, None], idx, np.iinfo(np.int64).max)
    choice = cand.min(axis=1)
    overflow = np.flatnonzero(d2[:, -1] == best) if k < len(src) else []
    for n in overflow:
        ball = tree.query_ball_point(dst[n], np.sqrt(best[n]) + 1e-9)
        ties = [b for b in ball if ((src[b] - dst[n]) ** 2).sum() == best[n]]
        choice[n] = min(ties)
    rows, cols = src[choice].T
    out[dst[:, 0], dst[:, 1]] = out[rows, cols]
    return out


def extract_degraded_frames(y: Measurement, masks: MaskStack, tau: float) -> list[DegradedFrame]:
    """One coarse frame per mask from a single measurement."""
    ybar, sampled = normalize_measurement(y, masks)
    frames = []
    for i, m in enumerate(masks.values):
        keep = select_mask(m, tau) & (m != 0) & sampled
        if not keep.any():
            raise EmptySelection(f"frame {i} retains no pixels at tau={tau}")
        sparse = np.where(keep[..., None], ybar, 0.0)
        frames.append(DegradedFrame(fill_interpolate(sparse, keep), keep))
    return frames


def downsample_points(q: SparsePoints, n: int = DEFAULT_POINTS, seed: int = 0) -> SparsePoints:
    """Uniform random subset of at most ``n`` points (input order kept)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if len(q) <= n:
        return q
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(q), size=n, replace=False))
    colors = None if q.colors is None else q.colors[idx]
    return SparsePoints(q.positions[idx], colors)


def random_points(lo, hi, n: int, seed: int = 0) -> SparsePoints:
    """Points uniform in an axis-aligned box (random-initialization ablation)."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    return SparsePoints(lo + (hi - lo) * rng.random((n, 3)))


def knn_mean_distance(positions: np.ndarray, k: int = 3, fallback: float = 0.01) -> np.ndarray:
    n = len(positions)
    if n < 2:
        return np.full(n, fallback)
    k = min(k, n - 1)
    dist, _ = cKDTree(positions).query(positions, k=k + 1)
    return np.maximum(dist[:, 1:].mean(axis=1), 1e-7)


def _sample_color(frame: DegradedFrame, pose: Pose, k: Intrinsics, p: np.ndarray) -> np.ndarray | None:
    try:
        (u, v), _ = project_point(k, pose, p)
    except BehindCamera:
        return None
    h, w = frame.validity.shape
    j, i = int(np.floor(u)), int(np.floor(v))
    if 0 <= i < h and 0 <= j < w:
        c = frame.image[i, j]
        return np.broadcast_to(c, (3,)) if c.size == 1 else c[:3]
    return None


def init_gaussians(points: SparsePoints, frames: list[DegradedFrame], poses: PoseSet) -> GaussianCloud:
    """Seed one Gaussian per point.

    Colors come from the points when available, otherwise from the first
    degraded frame at the point's projection (mid-gray off-image). Scales are
    isotropic at the mean distance to the 3 nearest neighbors; opacity 0.1.
    """
    if len(points) == 0:
        raise ValidationError("need at least one point")
    pos = points.positions
    if points.colors is not None:
        colors = points.colors.copy()
    else:
        colors = np.full((len(pos), 3), 0.5)
        if frames:
            for n, p in enumerate(pos):
                c = _sample_color(frames[0], poses.poses[0], poses.intrinsics, p)
                if c is not None:
                    colors[n] = c
    colors = np.clip(colors, 1e-3, 1 - 1e-3)
    scale = knn_mean_distance(pos)
    quats = np.zeros((len(pos), 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        pos.copy(),
        np.repeat(np.log(scale)[:, None], 3, axis=1),
        quats,
        np.full(len(pos), float(logit(INIT_OPACITY))),
        logit(colors),
    )


def perturb_poses(poses, sigma_rot: float, sigma_trans: float, seed: int) -> list[Pose]:
    """Left-multiply each pose by a random twist (rotation in radians)."""
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        xi = np.concatenate([rng.normal(0.0, sigma_rot, 3), rng.normal(0.0, sigma_trans, 3)])
        out.append(p if sigma_rot == 0 and sigma_trans == 0 else se3_exp(xi) @ p)
    return out


def init_poses(mode: str, intrinsics: Intrinsics, **args) -> PoseSet:
    """Initial camera poses.

    Modes:
        ``spline``: ``start``, ``end``, ``n`` -- linear SE(3) trajectory.
        ``import``: ``path`` -- JSON pose file from an external SfM run.
        ``perturbed_gt``: ``poses``, ``sigma_rot``, ``sigma_trans``, ``seed``.
    """
    if mode == "spline":
        n = int(args["n"])
        poses = [interpolate_pose(args["start"], args["end"], i, n) for i in range(1, n + 1)]
    elif mode == "import":
        from .io import read_poses

        poses = read_poses(args["path"])
    elif mode == "perturbed_gt":
        poses = perturb_poses(
            args["poses"], args.get("sigma_rot", 0.0), args.get("sigma_trans", 0.0), args.get("seed", 0)
        )
    else:
        raise ValidationError(f"unknown pose init mode {mode!r}")
    return PoseSet(list(poses), intrinsics)
