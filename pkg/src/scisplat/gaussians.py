"""Explicit Gaussian scene representation.

Every attribute is stored in an unconstrained parameterization so plain
gradient steps keep the cloud valid: log-scales, quaternion (renormalized
after each update), and logits for opacity and color.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

PARAM_GROUPS = ("means", "log_scales", "quats", "opacity_logits", "color_logits")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray  # (w, x, y, z)
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    revision: int = field(default=0, compare=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        m = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(m, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(m, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(m)
        self.color_logits = np.asarray(self.color_logits, dtype=np.float64).reshape(m, 3)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_attributes(cls, means, scales, quats, opacities, colors) -> "GaussianCloud":
        """Build from activated values (scales > 0, opacity/color in (0, 1))."""
        return cls(
            means,
            np.log(np.asarray(scales, dtype=np.float64)),
            quats,
            logit(opacities),
            logit(colors),
        )

    def __len__(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()}, revision=self.revision)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{k: v[idx].copy() for k, v in self.params().items()})

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k)]) for k, v in self.params().items()},
            revision=self.revision + 1,
        )

    def normalize_quats(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def touch(self) -> None:
        """Mark the parameters as modified."""
        self.revision += 1

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in PARAM_GROUPS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    def is_valid(self, tol: float = 1e-9) -> bool:
        finite = all(np.isfinite(v).all() for v in self.params().values())
        unit = np.allclose(np.linalg.norm(self.quats, axis=1), 1.0, atol=tol, rtol=0) if len(self) else True
        o = self.opacities
        return bool(finite and unit and np.all((o > 0) & (o < 1)) and np.all(self.scales > 0))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices ``(..., 3, 3)`` from quaternions ``(..., 4)``; normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_grad_to_quat(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull ``dL/dR`` back to the raw (unnormalized) quaternion.

    The result is orthogonal to ``q``: scaling a quaternion leaves the
    rotation unchanged.
    """
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2]
              - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=-1)
    gq = gq - np.sum(gq * qn, axis=-1, keepdims=True) * qn
    return gq / norm


def covariance_from_scale_rotation(log_scale, quat) -> np.ndarray:
    """``R S S^T R^T`` with ``S = diag(exp(log_scale))``; works batched."""
    rot = quat_to_rotmat(quat)
    m = rot * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    return m @ np.swapaxes(m, -1, -2)
