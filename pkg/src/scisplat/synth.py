"""Procedural ground truth for desk-scale experiments.

The scene is itself a Gaussian cloud, so ground-truth frames come from the
same renderer used for reconstruction and every error is measurable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Intrinsics, Pose, interpolate_pose, look_at
from .errors import FileFormatError, InvalidSpec
from .gaussians import GaussianCloud
from .io import (
    Manifest,
    load_manifest,
    quantize,
    read_cloud,
    read_poses,
    read_tensor,
    write_cloud,
    write_manifest,
    write_poses,
    write_tensor,
)
from .metrics import Trajectory
from .render import render_views
from .sci_forward import (
    MaskStack,
    Measurement,
    generate_masks,
    modulate_sum,
    synthesize_measurement,
)

PALETTES = ("checker", "random", "gradient")
TRAJECTORIES = ("linear", "arc", "snake")
CHECKER_COLORS = np.array([[0.92, 0.78, 0.25], [0.12, 0.22, 0.62]])


@dataclass
class SceneSpec:
    n_gaussians: int = 81
    extent: float = 2.0  # side of the square plane / cube holding the Gaussians
    palette: str = "checker"
    trajectory: str = "linear"
    height: int = 64
    width: int = 64
    cr: int = 8
    overlap_ratio: float = 0.25
    noise_sigma: float = 0.0
    seed: int = 0
    camera_distance: float = 1.2
    # camera travel over the exposure as a fraction of the scene diagonal
    motion_fraction: float = 0.05
    tilt_deg: float = 25.0  # about the y axis
    # a second tilt about x keeps grid rows from sharing a depth, so tiny
    # rotations never reorder overlapping Gaussians
    tilt_x_deg: float = 15.0
    snake_amplitude: float = 0.25  # relative to the travel length
    snake_cycles: float = 1.0
    arc_degrees: float | None = None
    start: dict | None = None  # optional explicit endpoint poses
    end: dict | None = None

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise InvalidSpec("n_gaussians must be >= 1")
        if self.cr < 1:
            raise InvalidSpec("cr must be >= 1")
        if not 0.0 < self.overlap_ratio <= 1.0:
            raise InvalidSpec("overlap_ratio must be in (0, 1]")
        if self.height < 1 or self.width < 1:
            raise InvalidSpec("image size must be positive")
        if self.extent <= 0 or self.camera_distance <= 0 or self.motion_fraction < 0:
            raise InvalidSpec("extent and camera distance must be positive, motion non-negative")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.palette not in PALETTES:
            raise InvalidSpec(f"palette must be one of {PALETTES}")
        if self.trajectory not in TRAJECTORIES:
            raise InvalidSpec(f"trajectory must be one of {TRAJECTORIES}")
        if (self.start is None) != (self.end is None):
            raise InvalidSpec("give both start and end poses or neither")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown scene spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidSpec(f"{path}: cannot read scene spec ({exc})") from exc
        if not isinstance(data, dict):
            raise InvalidSpec(f"{path}: scene spec must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def diagonal(self) -> float:
        return float(np.sqrt(2.0) * self.extent)


def _tilt(deg_y: float, deg_x: float) -> np.ndarray:
    a, b = np.deg2rad(deg_y), np.deg2rad(deg_x)
    ry = np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(b), -np.sin(b)], [0.0, np.sin(b), np.cos(b)]])
    return ry @ rx


def _rot_to_quat(rot: np.ndarray) -> np.ndarray:
    # valid for rotations well away from 180 degrees, which is all we build here
    w = np.sqrt(max(1.0 + np.trace(rot), 1e-12)) / 2
    return np.array([w, (rot[2, 1] - rot[1, 2]) / (4 * w), (rot[0, 2] - rot[2, 0]) / (4 * w), (rot[1, 0] - rot[0, 1]) / (4 * w)])


def _plane_cloud(spec: SceneSpec, rng: np.random.Generator) -> GaussianCloud:
    """Square grid of flat Gaussians on a tilted plane through the origin."""
    side = int(np.ceil(np.sqrt(spec.n_gaussians)))
    step = spec.extent / side
    coords = (np.arange(side) + 0.5) * step - spec.extent / 2
    gx, gy = np.meshgrid(coords, coords)
    local = np.stack([gx.ravel(), gy.ravel(), np.zeros(side * side)], axis=1)[: spec.n_gaussians]
    cells = np.stack(np.meshgrid(np.arange(side), np.arange(side)), axis=-1).reshape(-1, 2)[: spec.n_gaussians]
    rot = _tilt(spec.tilt_deg, spec.tilt_x_deg)
    means = local @ rot.T
    scales = np.tile([0.6 * step, 0.6 * step, 0.02 * step], (len(means), 1))
    quats = np.tile(_rot_to_quat(rot), (len(means), 1))
    if spec.palette == "checker":
        colors = CHECKER_COLORS[(cells[:, 0] + cells[:, 1]) % 2]
        colors = np.clip(colors + rng.uniform(-0.05, 0.05, colors.shape), 0.02, 0.98)
    elif spec.palette == "gradient":
        t = (local[:, :2] / spec.extent) + 0.5
        colors = np.clip(np.stack([t[:, 0], t[:, 1], 1 - t[:, 0]], axis=1), 0.05, 0.95)
    else:
        colors = rng.uniform(0.05, 0.95, (len(means), 3))
    opac = np.full(len(means), 0.95)
    return GaussianCloud.from_attributes(means, scales, quats, opac, colors)


def _random_cloud(spec: SceneSpec, rng: np.random.Generator) -> GaussianCloud:
    half = spec.extent / 2
    m = spec.n_gaussians
    means = rng.uniform(-half, half, (m, 3))
    size = spec.extent / max(m, 1) ** (1 / 3)
    scales = size * rng.uniform(0.2, 0.5, (m, 3))
    quats = rng.standard_normal((m, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    if spec.palette == "gradient":
        t = (means + half) / spec.extent
        colors = np.clip(t, 0.05, 0.95)
    else:
        colors = rng.uniform(0.05, 0.95, (m, 3))
    opac = rng.uniform(0.5, 0.95, m)
    return GaussianCloud.from_attributes(means, scales, quats, opac, colors)


def trajectory_centers(spec: SceneSpec, n: int) -> np.ndarray:
    """Camera centers for ``n`` frames; frame ``i`` (1-based) sits at ``s = (i - 1) / (n - 1)``.

    linear: straight segment of length ``L = motion_fraction * diagonal`` along +x.
    arc: circle around the scene center through the same chord length.
    snake: the linear segment plus ``A * sin(2 pi * cycles * s)`` along +y with
    ``A = snake_amplitude * L``.
    """
    length = spec.motion_fraction * spec.diagonal
    d = spec.camera_distance
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    x = (s - 0.5) * length
    if spec.trajectory == "linear":
        return np.stack([x, np.zeros(n), np.full(n, -d)], axis=1)
    if spec.trajectory == "snake":
        y = spec.snake_amplitude * length * np.sin(2 * np.pi * spec.snake_cycles * s)
        return np.stack([x, y, np.full(n, -d)], axis=1)
    span = np.deg2rad(spec.arc_degrees) if spec.arc_degrees is not None else 2 * np.arcsin(min(length / (2 * d), 1.0))
    ang = (s - 0.5) * span
    return np.stack([d * np.sin(ang), np.zeros(n), -d * np.cos(ang)], axis=1)


def build_trajectory(spec: SceneSpec, n: int | None = None) -> Trajectory:
    n = spec.cr if n is None else n
    if spec.start is not None:
        start = Pose(np.asarray(spec.start["rotation"], dtype=float).reshape(3, 3), spec.start["translation"])
        end = Pose(np.asarray(spec.end["rotation"], dtype=float).reshape(3, 3), spec.end["translation"])
        return Trajectory([interpolate_pose(start, end, i, n) for i in range(1, n + 1)])
    centers = trajectory_centers(spec, n)
    if spec.trajectory == "linear":
        # constant orientation: a pure translation, exactly the SE(3) interpolant
        rot = look_at(np.array([0.0, 0.0, -spec.camera_distance]), np.zeros(3)).rotation
        return Trajectory([Pose(rot, -rot @ c) for c in centers])
    return Trajectory([look_at(c, np.zeros(3)) for c in centers])


def scene_intrinsics(spec: SceneSpec) -> Intrinsics:
    # the untilted plane spans about 95% of the narrower image side
    f = 0.95 * min(spec.width, spec.height) / 2 * spec.camera_distance / (spec.extent / 2)
    return Intrinsics(f, f, spec.width / 2, spec.height / 2)


def build_scene(spec: SceneSpec) -> tuple[GaussianCloud, Trajectory, Intrinsics]:
    rng = np.random.default_rng(spec.seed)
    cloud = _plane_cloud(spec, rng) if spec.palette == "checker" else _random_cloud(spec, rng)
    traj = build_trajectory(spec)
    k = scene_intrinsics(spec)
    centroid = cloud.means.mean(axis=0)
    for p in traj.poses:
        pc = p.apply(centroid[None])[0]
        u, v = k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy
        if not (pc[2] > 0 and 0 <= u < spec.width and 0 <= v < spec.height):
            raise InvalidSpec("a trajectory pose does not see the scene centroid")
    return cloud, traj, k


@dataclass
class DatasetBundle:
    frames: np.ndarray  # (N, H, W, 3), float32-representable
    masks: MaskStack
    measurement: Measurement  # float32-representable
    poses: list[Pose]
    intrinsics: Intrinsics
    cloud: GaussianCloud
    spec: SceneSpec
    extra: dict = field(default_factory=dict)


def build_dataset(spec: SceneSpec, threads: int | None = None) -> DatasetBundle:
    """Render ground truth, draw masks and synthesize the measurement.

    Frames and the measurement are rounded to float32 so the stored tensors
    are exactly what was used (re-synthesis reproduces the file bit for bit).
    """
    cloud, traj, k = build_scene(spec)
    frames, _ = render_views(cloud, traj.poses, k, spec.height, spec.width, threads)
    frames = quantize(np.stack(frames))
    masks = generate_masks(spec.height, spec.width, spec.cr, spec.overlap_ratio, spec.seed)
    y = synthesize_measurement(frames, masks, spec.noise_sigma, spec.seed)
    y = Measurement(quantize(y.image), y.noise_sigma)
    return DatasetBundle(frames, masks, y, list(traj.poses), k, cloud, spec)


def write_dataset(bundle: DatasetBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "measurement.scit", bundle.measurement.image)
    write_tensor(d / "masks.scit", bundle.masks.values)
    write_tensor(d / "frames.scit", bundle.frames)
    write_poses(d / "poses.json", bundle.poses)
    write_cloud(d / "cloud.scit", bundle.cloud)
    (d / "scene.json").write_text(json.dumps(bundle.spec.to_dict(), indent=1))
    spec = bundle.spec
    man = Manifest(
        measurement="measurement.scit",
        masks="masks.scit",
        intrinsics=asdict(bundle.intrinsics),
        height=spec.height,
        width=spec.width,
        cr=spec.cr,
        overlap_ratio=spec.overlap_ratio,
        tau=1.0,
        noise_sigma=spec.noise_sigma,
        seed=spec.seed,
        frames="frames.scit",
        poses="poses.json",
        cloud="cloud.scit",
        extra={"scene": "scene.json"},
    )
    return write_manifest(d, man)


def load_dataset(path) -> DatasetBundle:
    """Load a bundle written by :func:`write_dataset` and validate it."""
    man, root = load_manifest(path)
    masks = MaskStack(read_tensor(root / man.masks), nominal_or=man.overlap_ratio, seed=man.seed)
    y = Measurement(read_tensor(root / man.measurement), man.noise_sigma)
    frames = read_tensor(root / man.frames) if man.frames else None
    poses = read_poses(root / man.poses) if man.poses else []
    cloud = read_cloud(root / man.cloud) if man.cloud else GaussianCloud.empty()
    scene = man.extra.get("scene")
    spec = SceneSpec.from_json(root / scene) if scene else None
    bundle = DatasetBundle(frames, masks, y, poses, man.get_intrinsics(), cloud, spec)
    validate_bundle(bundle)
    return bundle


def validate_bundle(b: DatasetBundle) -> None:
    m = b.masks.values
    if ((m < 0) | (m > 1)).any():
        raise FileFormatError("mask values outside [0, 1]")
    y = b.measurement.image
    if (y < 0).any() or not np.isfinite(y).all():
        raise FileFormatError("measurement must be finite and non-negative")
    if b.frames is None:
        return
    if ((b.frames < 0) | (b.frames > 1)).any():
        raise FileFormatError("ground-truth frames outside [0, 1]")
    if b.poses and len(b.poses) != m.shape[0]:
        raise FileFormatError("one ground-truth pose per mask required")
    if b.measurement.noise_sigma == 0:
        if (y > b.masks.coverage()[..., None]).any():
            raise FileFormatError("measurement exceeds the per-pixel mask sum")
        if not np.array_equal(quantize(modulate_sum(b.frames, b.masks)), y):
            raise FileFormatError("measurement does not match re-synthesis from stored frames")
