"""On-disk formats.

SCIT tensor layout: magic ``b"SCIT"``, little-endian u32 version (1), u32
ndim, ndim u32 dims, then row-major little-endian float32 data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Intrinsics, Pose
from .errors import FileFormatError
from .gaussians import PARAM_GROUPS, GaussianCloud
from .init_protocol import SparsePoints

MAGIC = b"SCIT"
SCIT_VERSION = 1
MANIFEST_VERSION = 1


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<II", SCIT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a SCIT file as float64."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FileFormatError(f"{path}: not a SCIT file")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != SCIT_VERSION:
        raise FileFormatError(f"{path}: unsupported SCIT version {version}")
    offset = 12 + 4 * ndim
    if len(data) < offset:
        raise FileFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", data, 12)
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) != offset + 4 * count:
        raise FileFormatError(f"{path}: expected {count} floats, found {(len(data) - offset) / 4}")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).astype(np.float64)


def quantize(array) -> np.ndarray:
    """Round to the float32 grid the tensor format stores."""
    return np.asarray(array, dtype=np.float32).astype(np.float64)


def _orthonormalize(rot: np.ndarray, where: str) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    fixed = u @ vt
    if np.linalg.det(fixed) < 0 or np.abs(fixed - rot).max() > 1e-3:
        raise FileFormatError(f"{where}: rotation is not a proper rotation matrix")
    return fixed


def poses_to_json(poses) -> list[dict]:
    return [
        {
            "frame_index": i,
            "rotation": [float(v) for v in p.rotation.ravel()],
            "translation": [float(v) for v in p.translation],
        }
        for i, p in enumerate(poses)
    ]


def write_poses(path, poses) -> None:
    Path(path).write_text(json.dumps(poses_to_json(poses), indent=1))


def poses_from_json(entries, where: str = "poses") -> list[Pose]:
    if not isinstance(entries, list) or not entries:
        raise FileFormatError(f"{where}: expected a non-empty JSON array")
    out = []
    try:
        entries = sorted(entries, key=lambda e: int(e["frame_index"]))
        for e in entries:
            rot = np.asarray(e["rotation"], dtype=np.float64)
            t = np.asarray(e["translation"], dtype=np.float64)
            if rot.size != 9 or t.size != 3 or not (np.isfinite(rot).all() and np.isfinite(t).all()):
                raise FileFormatError(f"{where}: bad pose entry for frame {e['frame_index']}")
            rot = rot.reshape(3, 3)
            pose = Pose(rot, t)
            if not pose.is_valid():
                pose = Pose(_orthonormalize(rot, where), t)
            out.append(pose)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(f"{where}: malformed pose entry ({exc})") from exc
    indices = [int(e["frame_index"]) for e in entries]
    if len(set(indices)) != len(indices):
        raise FileFormatError(f"{where}: duplicate frame_index")
    return out


def read_poses(path) -> list[Pose]:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc
    return poses_from_json(entries, str(path))


def write_points(path, points) -> None:
    rows = []
    for n, p in enumerate(points.positions):
        row = {"xyz": [float(v) for v in p]}
        if points.colors is not None:
            row["rgb"] = [float(v) for v in points.colors[n]]
        rows.append(row)
    Path(path).write_text(json.dumps(rows))


def read_points(path) -> SparsePoints:
    try:
        rows = json.loads(Path(path).read_text())
        xyz = np.array([r["xyz"] for r in rows], dtype=np.float64).reshape(-1, 3)
        has_rgb = [("rgb" in r) for r in rows]
        if any(has_rgb) and not all(has_rgb):
            raise FileFormatError(f"{path}: rgb must be given for all points or none")
        rgb = np.array([r["rgb"] for r in rows], dtype=np.float64).reshape(-1, 3) if rows and all(has_rgb) else None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(f"{path}: malformed points file ({exc})") from exc
    if not np.isfinite(xyz).all() or (rgb is not None and ((rgb < 0) | (rgb > 1)).any()):
        raise FileFormatError(f"{path}: non-finite positions or colors outside [0, 1]")
    return SparsePoints(xyz, rgb)


def cloud_to_array(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate(
        [cloud.means, cloud.log_scales, cloud.quats, cloud.opacity_logits[:, None], cloud.color_logits], axis=1
    )


def cloud_from_array(arr: np.ndarray) -> GaussianCloud:
    if arr.ndim != 2 or arr.shape[1] != 14:
        raise FileFormatError(f"cloud tensor must be (M, 14), got {arr.shape}")
    cloud = GaussianCloud(arr[:, 0:3], arr[:, 3:6], arr[:, 6:10], arr[:, 10], arr[:, 11:14])
    cloud.normalize_quats()
    return cloud


def write_cloud(path, cloud: GaussianCloud) -> None:
    write_tensor(path, cloud_to_array(cloud))


def read_cloud(path) -> GaussianCloud:
    return cloud_from_array(read_tensor(path))


@dataclass
class Manifest:
    """Dataset description; file paths are relative to the manifest."""

    measurement: str
    masks: str
    intrinsics: dict
    height: int
    width: int
    cr: int
    overlap_ratio: float
    tau: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0
    frames: str | None = None
    poses: str | None = None
    cloud: str | None = None
    format_version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def get_intrinsics(self) -> Intrinsics:
        return Intrinsics(**self.intrinsics)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            data = json.loads(text)
            if data.get("format_version") != MANIFEST_VERSION:
                raise FileFormatError(f"unrecognized manifest version {data.get('format_version')}")
            return cls(**data)
        except (json.JSONDecodeError, TypeError) as exc:
            raise FileFormatError(f"malformed manifest ({exc})") from exc


def write_manifest(directory, manifest: Manifest) -> Path:
    path = Path(directory) / "manifest.json"
    path.write_text(manifest.to_json())
    return path


def load_manifest(path) -> tuple[Manifest, Path]:
    """Read and shape-check a manifest; ``path`` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileFormatError(f"{path}: manifest not found")
    man = Manifest.from_json(path.read_text())
    root = path.parent
    for name in ("measurement", "masks", "frames", "poses", "cloud"):
        rel = getattr(man, name)
        if rel is not None and not (root / rel).exists():
            raise FileFormatError(f"{path}: referenced file {rel} does not exist")
    masks = read_tensor(root / man.masks)
    y = read_tensor(root / man.measurement)
    if masks.shape != (man.cr, man.height, man.width):
        raise FileFormatError(f"mask tensor {masks.shape} disagrees with manifest")
    if y.shape[:2] != (man.height, man.width):
        raise FileFormatError(f"measurement tensor {y.shape} disagrees with manifest")
    if man.frames is not None:
        fr = read_tensor(root / man.frames)
        if fr.shape[:3] != (man.cr, man.height, man.width):
            raise FileFormatError(f"frames tensor {fr.shape} disagrees with manifest")
    return man, root


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_checkpoint(directory, cloud: GaussianCloud, poses, intrinsics: Intrinsics, header: dict) -> None:
    """One SCIT blob per parameter group, poses as JSON, and a JSON header."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in PARAM_GROUPS:
        arr = getattr(cloud, name)
        write_tensor(d / f"{name}.scit", arr.reshape(len(cloud), -1))
    write_poses(d / "poses.json", poses)
    full = dict(header, n_gaussians=len(cloud), intrinsics=asdict(intrinsics), format_version=1)
    (d / "checkpoint.json").write_text(json.dumps(full, indent=1, sort_keys=True))


def read_checkpoint(directory):
    """Returns ``(cloud, poses, intrinsics, header)``."""
    d = Path(directory)
    if not (d / "checkpoint.json").exists():
        raise FileFormatError(f"{d}: not a checkpoint directory")
    header = json.loads((d / "checkpoint.json").read_text())
    groups = {name: read_tensor(d / f"{name}.scit") for name in PARAM_GROUPS}
    m = header["n_gaussians"]
    if any(len(v) != m for v in groups.values()):
        raise FileFormatError(f"{d}: parameter groups disagree on Gaussian count")
    cloud = GaussianCloud(**groups)
    if m:
        cloud.normalize_quats()
    return cloud, read_poses(d / "poses.json"), Intrinsics(**header["intrinsics"]), header
