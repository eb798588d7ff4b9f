"""Forward rasterization of a Gaussian cloud.

Gaussians are projected with the affine (EWA) approximation, sorted globally
by camera depth, binned into 16x16 pixel tiles and alpha-composited front to
back. Tile binning is conservative: a Gaussian is listed for every tile in
which any pixel could receive ``alpha >= 1/255`` from it, so the tiled image
is identical to compositing every Gaussian at every pixel.

Pixel ``(row i, col j)`` has its center at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .core import NEAR_CLIP, Intrinsics, Pose
from .errors import Culled
from .gaussians import GaussianCloud, covariance_from_scale_rotation, sigmoid

BLUR = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
TILE = 16
MIN_RADIUS = 0.3


@dataclass
class Projected2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float


@dataclass
class ProjectedCloud:
    """Screen-space state of the visible Gaussians, sorted front to back."""

    ids: np.ndarray  # indices into the cloud
    means2d: np.ndarray
    conics: np.ndarray  # (a, b, c) of the inverse 2D covariance
    cov2d: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    extents: np.ndarray  # tile-binning radius
    opacities: np.ndarray
    colors: np.ndarray
    p_cam: np.ndarray
    cov_cam: np.ndarray
    cov3d: np.ndarray
    jac: np.ndarray


@dataclass
class RenderAux:
    """Everything backward needs to differentiate one rasterize call."""

    checksum: str
    pose: Pose
    intrinsics: Intrinsics
    proj: ProjectedCloud
    height: int
    width: int
    final_t: np.ndarray
    last: np.ndarray
    offsets: np.ndarray
    tile_ids: np.ndarray
    tile_size: int


def default_threads() -> int:
    return int(os.environ.get("SCISPLAT_THREADS", "1"))


def _jacobian(p_cam: np.ndarray, k: Intrinsics) -> np.ndarray:
    x, y, z = p_cam.T
    jac = np.zeros((len(p_cam), 2, 3))
    jac[:, 0, 0] = k.fx / z
    jac[:, 0, 2] = -k.fx * x / z**2
    jac[:, 1, 1] = k.fy / z
    jac[:, 1, 2] = -k.fy * y / z**2
    return jac


def _max_eig_2x2(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


def project_cloud(cloud: GaussianCloud, pose: Pose, k: Intrinsics) -> ProjectedCloud:
    """Project every Gaussian in front of the near plane and depth-sort them."""
    p_cam = pose.apply(cloud.means)
    visible = np.flatnonzero(p_cam[:, 2] > NEAR_CLIP)
    p_cam = p_cam[visible]
    cov3d = covariance_from_scale_rotation(cloud.log_scales[visible], cloud.quats[visible])
    rot = pose.rotation
    cov_cam = rot @ cov3d @ rot.T
    jac = _jacobian(p_cam, k)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += BLUR
    cov2d[:, 1, 1] += BLUR
    lam = _max_eig_2x2(cov2d)
    radii = 3.0 * np.sqrt(lam)

    keep = radii >= MIN_RADIUS
    order = np.argsort(p_cam[keep, 2], kind="stable")
    sel = np.flatnonzero(keep)[order]

    cov2d = cov2d[sel]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    ids = visible[sel]
    opac = sigmoid(cloud.opacity_logits[ids])
    pc = p_cam[sel]
    means2d = np.stack([k.fx * pc[:, 0] / pc[:, 2] + k.cx, k.fy * pc[:, 1] / pc[:, 2] + k.cy], axis=1)
    # alpha >= 1/255 requires sigma <= log(255 o); sigma >= |d|^2 / (2 lambda_max)
    budget = np.log(np.maximum(255.0 * opac, 1.0))
    extents = np.sqrt(2.0 * lam[sel] * budget)
    extents = np.where(budget > 0, extents * (1 + 1e-9) + 1e-6, -1.0)
    return ProjectedCloud(
        ids=ids,
        means2d=means2d,
        conics=conics,
        cov2d=cov2d,
        depths=pc[:, 2].copy(),
        radii=radii[sel],
        extents=extents,
        opacities=opac,
        colors=sigmoid(cloud.color_logits[ids]),
        p_cam=pc,
        cov_cam=cov_cam[sel],
        cov3d=cov3d[sel],
        jac=jac[sel],
    )


def project_gaussian(cloud: GaussianCloud, index: int, pose: Pose, k: Intrinsics) -> Projected2D:
    """Screen-space footprint of a single Gaussian; raises :class:`Culled`."""
    single = cloud.subset([index])
    p = pose.apply(single.means)[0]
    if p[2] <= NEAR_CLIP:
        raise Culled(f"depth {p[2]:.4g} behind near clip")
    proj = project_cloud(single, pose, k)
    if len(proj.ids) == 0:
        raise Culled("footprint radius below threshold")
    return Projected2D(proj.means2d[0], proj.cov2d[0], float(proj.depths[0]), float(proj.radii[0]))


@numba.njit(cache=True, nogil=True)
def _bin_tiles(means2d, extents, h, w, tile):
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    n = means2d.shape[0]
    lo = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for g in range(n):
        r = extents[g]
        if r < 0:
            lo[g, 0] = 1
            lo[g, 1] = 0
            continue
        j0 = max(int(math.ceil(means2d[g, 0] - r - 0.5)), 0)
        j1 = min(int(math.floor(means2d[g, 0] + r - 0.5)), w - 1)
        i0 = max(int(math.ceil(means2d[g, 1] - r - 0.5)), 0)
        i1 = min(int(math.floor(means2d[g, 1] + r - 0.5)), h - 1)
        if j0 > j1 or i0 > i1:
            lo[g, 0] = 1
            lo[g, 1] = 0
            continue
        lo[g, 0] = j0 // tile
        lo[g, 1] = j1 // tile
        lo[g, 2] = i0 // tile
        lo[g, 3] = i1 // tile
        for ty in range(lo[g, 2], lo[g, 3] + 1):
            for tx in range(lo[g, 0], lo[g, 1] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    # depth order is preserved inside each tile because g is visited in order
    for g in range(n):
        if lo[g, 0] > lo[g, 1]:
            continue
        for ty in range(lo[g, 2], lo[g, 3] + 1):
            for tx in range(lo[g, 0], lo[g, 1] + 1):
                t = ty * ntx + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@numba.njit(cache=True, nogil=True)
def _forward_kernel(means2d, conics, opac, colors, offsets, ids, h, w, tile):
    img = np.zeros((h, w, 3))
    final_t = np.ones((h, w))
    last = np.full((h, w), -1, dtype=np.int64)
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            start, end = offsets[t], offsets[t + 1]
            for i in range(ty * tile, min((ty + 1) * tile, h)):
                py = i + 0.5
                for j in range(tx * tile, min((tx + 1) * tile, w)):
                    px = j + 0.5
                    trans = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    for k in range(start, end):
                        g = ids[k]
                        dx = px - means2d[g, 0]
                        dy = py - means2d[g, 1]
                        sigma = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
                        alpha = opac[g] * math.exp(-sigma)
                        if alpha > 0.999:
                            alpha = 0.999
                        if alpha < 1.0 / 255.0:
                            continue
                        wgt = alpha * trans
                        c0 += wgt * colors[g, 0]
                        c1 += wgt * colors[g, 1]
                        c2 += wgt * colors[g, 2]
                        trans *= 1.0 - alpha
                        last[i, j] = k
                    img[i, j, 0] = c0
                    img[i, j, 1] = c1
                    img[i, j, 2] = c2
                    final_t[i, j] = trans
    return img, final_t, last


def rasterize(
    cloud: GaussianCloud, pose: Pose, k: Intrinsics, h: int, w: int, tile_size: int = TILE
) -> tuple[np.ndarray, RenderAux]:
    """Render one view; returns ``(image (h, w, 3), aux)``."""
    proj = project_cloud(cloud, pose, k)
    offsets, tile_ids = _bin_tiles(proj.means2d, proj.extents, h, w, tile_size)
    img, final_t, last = _forward_kernel(
        proj.means2d, proj.conics, proj.opacities, proj.colors, offsets, tile_ids, h, w, tile_size
    )
    aux = RenderAux(cloud.checksum(), pose, k, proj, h, w, final_t, last, offsets, tile_ids, tile_size)
    return img, aux


def composite_dense(proj: ProjectedCloud, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference path: every Gaussian evaluated at every pixel, no tiling.

    Returns ``(image, final transmittance)``.
    """
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dx = jj[None] - proj.means2d[:, 0, None, None]
    dy = ii[None] - proj.means2d[:, 1, None, None]
    a, b, c = (proj.conics[:, n, None, None] for n in range(3))
    sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
    alpha = np.minimum(proj.opacities[:, None, None] * np.exp(-sigma), ALPHA_MAX)
    alpha = np.where(alpha < ALPHA_MIN, 0.0, alpha)
    one_minus = 1.0 - alpha
    trans = np.concatenate([np.ones((1, h, w)), np.cumprod(one_minus, axis=0)[:-1]], axis=0)
    weights = alpha * trans
    img = np.einsum("khw,kc->hwc", weights, proj.colors)
    final_t = np.prod(one_minus, axis=0) if len(alpha) else np.ones((h, w))
    return img, final_t


def render_views(
    cloud: GaussianCloud,
    poses,
    k: Intrinsics,
    h: int,
    w: int,
    threads: int | None = None,
) -> tuple[list[np.ndarray], list[RenderAux]]:
    """Rasterize one image per pose. Results do not depend on ``threads``."""
    threads = threads or default_threads()
    if threads > 1 and len(poses) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda p: rasterize(cloud, p, k, h, w), poses))
    else:
        out = [rasterize(cloud, p, k, h, w) for p in poses]
    return [o[0] for o in out], [o[1] for o in out]
