"""Shared value types, SE(3) algebra and pinhole geometry.

Poses are world-to-camera: a world point ``p`` maps to camera coordinates
``R @ p + t``. Twists are 6-vectors ``(omega, v)`` with the rotational part
first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, BehindCamera, ValidationError

NEAR_CLIP = 0.01
SMALL_ANGLE = 1e-8
LOG_PI_MARGIN = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def check_image(self, height: int, width: int) -> None:
        if abs(self.cx) > 2 * width or abs(self.cy) > 2 * height:
            raise ValidationError("principal point outside +-2x image bounds")


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.abs(r @ r.T - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ x == cross(w, x)``."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _exp_coefficients(theta: float) -> tuple[float, float, float]:
    # sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _exp_coefficients(theta)
    w = hat(omega)
    return np.eye(3) + a * w + b * (w @ w)


def se3_exp(xi) -> Pose:
    """Exponential map from a twist ``(omega, v)`` to a pose."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    a, b, c = _exp_coefficients(theta)
    w = hat(omega)
    ww = w @ w
    rot = np.eye(3) + a * w + b * ww
    vmat = np.eye(3) + b * w + c * ww
    return Pose(rot, vmat @ v)


def so3_log(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    tr = float(np.trace(rot))
    if tr <= -1.0 + LOG_PI_MARGIN:
        raise AngleNearPi(f"rotation trace {tr:.3g} too close to -1")
    skew = vee(rot - rot.T) / 2.0
    theta = float(np.arctan2(np.linalg.norm(skew), (tr - 1.0) / 2.0))
    if theta < SMALL_ANGLE:
        factor = 1.0 + theta * theta / 6.0
    else:
        factor = theta / np.sin(theta)
    return factor * skew


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map on the principal branch; inverse of :func:`se3_exp`."""
    omega = so3_log(pose.rotation)
    theta = float(np.linalg.norm(omega))
    w = hat(omega)
    if theta < SMALL_ANGLE:
        k = 1.0 / 12.0 + theta * theta / 720.0
    else:
        k = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    vinv = np.eye(3) - 0.5 * w + k * (w @ w)
    return np.concatenate([omega, vinv @ pose.translation])


def interpolate_pose(start: Pose, end: Pose, i: int, n: int) -> Pose:
    """Pose of frame ``i`` (1-based) on the geodesic from ``start`` to ``end``.

    Frame 1 reproduces ``start`` and frame ``n`` reproduces ``end`` exactly.
    """
    if n < 2 or not 1 <= i <= n:
        raise ValidationError(f"need 1 <= i <= n and n >= 2, got i={i}, n={n}")
    if i == 1:
        return start
    if i == n:
        return end
    s = (i - 1) / (n - 1)
    delta = se3_log(start.inverse() @ end)
    return start @ se3_exp(s * delta)


def left_perturb(pose: Pose, xi) -> Pose:
    """``exp(xi) @ pose``, the update convention used for pose gradients."""
    return se3_exp(xi) @ pose


def project_point(
    k: Intrinsics, pose: Pose, p_world, near: float = NEAR_CLIP
) -> tuple[np.ndarray, float]:
    """Project a world point; returns ``(pixel, depth)``."""
    x, y, z = pose.apply(np.asarray(p_world, dtype=np.float64))
    if not z > near:
        raise BehindCamera(f"depth {z:.4g} <= near clip {near}")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), float(z)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    Camera axes follow the pinhole convention: +z forward, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Pose(rot, -rot @ eye)
