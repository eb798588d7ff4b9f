"""Central finite-difference verification of the analytic backward pass.

Rendering is only piecewise smooth: alpha is skipped below 1/255, clamped at
0.999, Gaussians are culled and depth-sorted. A difference quotient that
straddles one of those events measures a jump, not a derivative, so each
probe compares the active set at ``x``, ``x + h`` and ``x - h`` and retries
with smaller steps; probes that never settle are reported as kinks instead
of being compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Intrinsics, look_at, se3_exp
from .errors import InvalidStep
from .gaussians import PARAM_GROUPS, GaussianCloud
from .grad import backward
from .render import ALPHA_MAX, ALPHA_MIN, ProjectedCloud, rasterize

POSE_GROUP = "pose"


def active_set(proj: ProjectedCloud, h: int, w: int) -> bytes:
    """Fingerprint of every discrete choice the compositor makes."""
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dx = jj[None] - proj.means2d[:, 0, None, None]
    dy = ii[None] - proj.means2d[:, 1, None, None]
    a, b, c = (proj.conics[:, n, None, None] for n in range(3))
    alpha = proj.opacities[:, None, None] * np.exp(-(0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy))
    return proj.ids.tobytes() + np.packbits(alpha < ALPHA_MIN).tobytes() + np.packbits(alpha > ALPHA_MAX).tobytes()


class RandomImageLoss:
    """Seeded ``sum(w * X) + 0.5 * sum((X - T)^2)`` over all views."""

    def __init__(self, n_views: int, h: int, w: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weights = rng.normal(size=(n_views, h, w, 3))
        self.targets = rng.random((n_views, h, w, 3))

    def __call__(self, images):
        x = np.stack(images)
        value = float(np.sum(self.weights * x) + 0.5 * np.sum((x - self.targets) ** 2))
        return value, self.weights + (x - self.targets)


@dataclass
class GroupReport:
    name: str
    max_rel_err: float = 0.0
    max_abs_err: float = 0.0
    checked: int = 0
    kinks: int = 0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and not self.failures


@dataclass
class GradCheckReport:
    groups: dict[str, GroupReport]
    step: float
    tolerance: float
    abs_tolerance: float

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups.values())

    def lines(self) -> list[str]:
        out = []
        for g in self.groups.values():
            status = "PASS" if g.passed else "FAIL"
            out.append(
                f"{g.name:<15} {status} max_rel={g.max_rel_err:.3e} max_abs={g.max_abs_err:.3e} "
                f"checked={g.checked} kinks={g.kinks}"
            )
        return out


class _Scene:
    def __init__(self, cloud, poses, k, h, w, loss):
        self.cloud, self.poses, self.k, self.h, self.w, self.loss = cloud, list(poses), k, h, w, loss

    def evaluate(self, cloud=None, poses=None):
        cloud = self.cloud if cloud is None else cloud
        poses = self.poses if poses is None else poses
        images, keys = [], []
        for p in poses:
            img, aux = rasterize(cloud, p, self.k, self.h, self.w)
            images.append(img)
            keys.append(active_set(aux.proj, self.h, self.w))
        return self.loss(images)[0], b"".join(keys)


def _compare(report: GroupReport, analytic: float, numeric: float, tol: float, abs_tol: float, where):
    err = abs(analytic - numeric)
    rel = err / max(abs(analytic), abs(numeric), 1e-300)
    report.checked += 1
    if err <= abs_tol:
        report.max_abs_err = max(report.max_abs_err, err)
        return
    report.max_rel_err = max(report.max_rel_err, rel)
    report.max_abs_err = max(report.max_abs_err, err)
    if rel > tol:
        report.failures.append((where, analytic, numeric))


def _probe(scene: _Scene, base_key: bytes, perturb, steps):
    """Central difference at the first step whose active set matches the base."""
    for h in steps:
        lp, kp = perturb(h)
        lm, km = perturb(-h)
        if kp == base_key and km == base_key:
            return (lp - lm) / (2 * h)
    return None


def finite_diff_check(
    cloud: GaussianCloud,
    poses,
    intrinsics: Intrinsics,
    height: int = 16,
    width: int = 16,
    loss=None,
    step: float = 1e-4,
    tolerance: float = 1e-3,
    abs_tolerance: float = 1e-6,
    seed: int = 0,
    refinements: int = 3,
) -> GradCheckReport:
    """Compare analytic gradients of every parameter and pose twist with central differences.

    ``loss(images) -> (value, d value / d images)``; defaults to a seeded
    random linear-plus-quadratic image loss.
    """
    if not step > 0:
        raise InvalidStep(f"finite-difference step must be positive, got {step}")
    poses = list(poses)
    loss = loss or RandomImageLoss(len(poses), height, width, seed)
    scene = _Scene(cloud, poses, intrinsics, height, width, loss)
    steps = [step / 10**r for r in range(refinements + 1)]

    images, auxes = [], []
    for p in poses:
        img, aux = rasterize(cloud, p, intrinsics, height, width)
        images.append(img)
        auxes.append(aux)
    _, upstream = loss(images)
    grads, pose_grads = backward(cloud, auxes, upstream)
    _, base_key = scene.evaluate()

    reports = {name: GroupReport(name) for name in PARAM_GROUPS + (POSE_GROUP,)}
    for name in PARAM_GROUPS:
        values = getattr(cloud, name)
        analytic = getattr(grads, name)
        for idx in np.ndindex(values.shape):

            def perturb(h, name=name, idx=idx):
                c = cloud.copy()
                getattr(c, name)[idx] += h
                return scene.evaluate(cloud=c)

            numeric = _probe(scene, base_key, perturb, steps)
            if numeric is None:
                reports[name].kinks += 1
                continue
            _compare(reports[name], float(analytic[idx]), numeric, tolerance, abs_tolerance, idx)

    for v in range(len(poses)):
        for comp in range(6):

            def perturb(h, v=v, comp=comp):
                xi = np.zeros(6)
                xi[comp] = h
                ps = list(poses)
                ps[v] = se3_exp(xi) @ poses[v]
                return scene.evaluate(poses=ps)

            numeric = _probe(scene, base_key, perturb, steps)
            if numeric is None:
                reports[POSE_GROUP].kinks += 1
                continue
            _compare(reports[POSE_GROUP], float(pose_grads[v, comp]), numeric, tolerance, abs_tolerance, (v, comp))

    return GradCheckReport(reports, step, tolerance, abs_tolerance)


def random_check_scene(seed: int, n_gaussians: int = 5, size: int = 16, n_views: int = 2):
    """Small seeded scene in front of slightly different cameras."""
    rng = np.random.default_rng(seed)
    means = rng.uniform([-0.6, -0.6, -0.4], [0.6, 0.6, 0.4], (n_gaussians, 3))
    scales = rng.uniform(0.08, 0.3, (n_gaussians, 3))
    quats = rng.standard_normal((n_gaussians, 4))
    opac = rng.uniform(0.3, 0.9, n_gaussians)
    colors = rng.uniform(0.1, 0.9, (n_gaussians, 3))
    cloud = GaussianCloud.from_attributes(means, scales, quats / np.linalg.norm(quats, axis=1, keepdims=True), opac, colors)
    f = size * 1.2
    k = Intrinsics(f, f, size / 2, size / 2)
    poses = [look_at(np.array([0.1 * v, 0.05 * v, -3.0]) + rng.normal(0, 0.05, 3), np.zeros(3)) for v in range(n_views)]
    return cloud, poses, k
