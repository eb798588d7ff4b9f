"""Analytic backward pass of the rasterizer and the pose chain.

Pose gradients use the left-multiplied tangent convention: the gradient of a
pose is ``dL/dxi`` at ``xi = 0`` for the perturbed pose ``exp(xi) @ T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import StaleAux
from .gaussians import PARAM_GROUPS, GaussianCloud, quat_to_rotmat, rotmat_grad_to_quat
from .render import RenderAux


@dataclass
class CloudGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    counts: np.ndarray  # contributing pixels per Gaussian
    screen_grad: np.ndarray  # accumulated |dL/d(mean2d)| per view, for ADC

    @classmethod
    def zeros(cls, m: int) -> "CloudGradients":
        return cls(
            np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)), np.zeros(m), np.zeros((m, 3)),
            np.zeros(m, dtype=np.int64), np.zeros(m),
        )

    def groups(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def __iadd__(self, other: "CloudGradients"):
        for name in PARAM_GROUPS + ("counts", "screen_grad"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.groups().values())


@numba.njit(cache=True, nogil=True)
def _backward_kernel(means2d, conics, opac, colors, offsets, ids, final_t, last, grad_img, h, w, tile):
    k_all = means2d.shape[0]
    g_mean = np.zeros((k_all, 2))
    g_conic = np.zeros((k_all, 3))
    g_opac = np.zeros(k_all)
    g_color = np.zeros((k_all, 3))
    counts = np.zeros(k_all, dtype=np.int64)
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            start = offsets[t]
            for i in range(ty * tile, min((ty + 1) * tile, h)):
                py = i + 0.5
                for j in range(tx * tile, min((tx + 1) * tile, w)):
                    px = j + 0.5
                    gr0 = grad_img[i, j, 0]
                    gr1 = grad_img[i, j, 1]
                    gr2 = grad_img[i, j, 2]
                    trans = final_t[i, j]
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    for k in range(last[i, j], start - 1, -1):
                        g = ids[k]
                        dx = px - means2d[g, 0]
                        dy = py - means2d[g, 1]
                        sigma = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
                        falloff = math.exp(-sigma)
                        alpha = opac[g] * falloff
                        clamped = False
                        if alpha > 0.999:
                            alpha = 0.999
                            clamped = True
                        if alpha < 1.0 / 255.0:
                            continue
                        # transmittance in front of this Gaussian
                        trans = trans / (1.0 - alpha)
                        wgt = alpha * trans
                        counts[g] += 1
                        g_color[g, 0] += wgt * gr0
                        g_color[g, 1] += wgt * gr1
                        g_color[g, 2] += wgt * gr2
                        inv = 1.0 / (1.0 - alpha)
                        d_alpha = (
                            gr0 * (colors[g, 0] * trans - s0 * inv)
                            + gr1 * (colors[g, 1] * trans - s1 * inv)
                            + gr2 * (colors[g, 2] * trans - s2 * inv)
                        )
                        s0 += colors[g, 0] * wgt
                        s1 += colors[g, 1] * wgt
                        s2 += colors[g, 2] * wgt
                        if clamped:
                            continue
                        g_opac[g] += d_alpha * falloff
                        d_sigma = -d_alpha * alpha
                        g_conic[g, 0] += d_sigma * 0.5 * dx * dx
                        g_conic[g, 1] += d_sigma * dx * dy
                        g_conic[g, 2] += d_sigma * 0.5 * dy * dy
                        # d = pixel - mean, so d(mean) = -d(d)
                        g_mean[g, 0] -= d_sigma * (conics[g, 0] * dx + conics[g, 1] * dy)
                        g_mean[g, 1] -= d_sigma * (conics[g, 1] * dx + conics[g, 2] * dy)
    return g_mean, g_conic, g_opac, g_color, counts


def backward_view(
    cloud: GaussianCloud, aux: RenderAux, grad_img: np.ndarray
) -> tuple[CloudGradients, np.ndarray]:
    """Gradients of ``sum(grad_img * image)`` for one rasterized view.

    Returns the cloud gradients and the 6-vector pose twist gradient.
    """
    if aux.checksum != cloud.checksum():
        raise StaleAux("cloud changed since the forward pass")
    grad_img = np.ascontiguousarray(grad_img, dtype=np.float64).reshape(aux.height, aux.width, 3)
    proj, k, pose = aux.proj, aux.intrinsics, aux.pose
    out = CloudGradients.zeros(len(cloud))
    if len(proj.ids) == 0:
        return out, np.zeros(6)
    g_mean, g_conic, g_opac, g_color, counts = _backward_kernel(
        proj.means2d, proj.conics, proj.opacities, proj.colors, aux.offsets, aux.tile_ids,
        aux.final_t, aux.last, grad_img, aux.height, aux.width, aux.tile_size,
    )

    # conic -> 2D covariance
    conic_full = np.empty((len(proj.ids), 2, 2))
    conic_full[:, 0, 0] = proj.conics[:, 0]
    conic_full[:, 0, 1] = conic_full[:, 1, 0] = proj.conics[:, 1]
    conic_full[:, 1, 1] = proj.conics[:, 2]
    g_conic_full = np.empty_like(conic_full)
    g_conic_full[:, 0, 0] = g_conic[:, 0]
    g_conic_full[:, 0, 1] = g_conic_full[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_conic_full[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -conic_full @ g_conic_full @ conic_full

    # 2D covariance -> camera covariance and Jacobian
    jac, cov_cam = proj.jac, proj.cov_cam
    g_cov_cam = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ cov_cam

    x, y, z = proj.p_cam.T
    g_p = np.zeros_like(proj.p_cam)
    g_p[:, 0] = g_mean[:, 0] * k.fx / z - g_jac[:, 0, 2] * k.fx / z**2
    g_p[:, 1] = g_mean[:, 1] * k.fy / z - g_jac[:, 1, 2] * k.fy / z**2
    g_p[:, 2] = (
        -(g_mean[:, 0] * k.fx * x + g_mean[:, 1] * k.fy * y) / z**2
        - g_jac[:, 0, 0] * k.fx / z**2
        - g_jac[:, 1, 1] * k.fy / z**2
        + g_jac[:, 0, 2] * 2 * k.fx * x / z**3
        + g_jac[:, 1, 2] * 2 * k.fy * y / z**3
    )

    rot = pose.rotation
    g_cov3d = rot.T @ g_cov_cam @ rot
    ids = proj.ids
    out.means[ids] = g_p @ rot

    # pose twist (omega, v)
    a = 2.0 * g_cov_cam @ cov_cam
    g_omega = np.cross(proj.p_cam, g_p).sum(axis=0) + np.array(
        [
            (a[:, 2, 1] - a[:, 1, 2]).sum(),
            (a[:, 0, 2] - a[:, 2, 0]).sum(),
            (a[:, 1, 0] - a[:, 0, 1]).sum(),
        ]
    )
    g_pose = np.concatenate([g_omega, g_p.sum(axis=0)])

    # covariance -> scale and rotation
    quats = cloud.quats[ids]
    rg = quat_to_rotmat(quats)
    scales = np.exp(cloud.log_scales[ids])
    mmat = rg * scales[:, None, :]
    g_m = 2.0 * g_cov3d @ mmat
    g_rg = g_m * scales[:, None, :]
    out.log_scales[ids] = np.sum(g_m * rg, axis=1) * scales
    out.quats[ids] = rotmat_grad_to_quat(quats, g_rg)

    o = proj.opacities
    out.opacity_logits[ids] = g_opac * o * (1.0 - o)
    c = proj.colors
    out.color_logits[ids] = g_color * c * (1.0 - c)
    out.counts[ids] = counts
    out.screen_grad[ids] = np.linalg.norm(g_mean, axis=1)
    return out, g_pose


def backward(
    cloud: GaussianCloud, auxes, upstream
) -> tuple[CloudGradients, np.ndarray]:
    """Accumulate gradients over views in view order.

    ``upstream`` holds one ``(H, W, 3)`` image gradient per view. Returns the
    cloud gradients and a ``(n_views, 6)`` array of pose twist gradients.
    """
    total = CloudGradients.zeros(len(cloud))
    pose_grads = np.zeros((len(auxes), 6))
    for v, (aux, g) in enumerate(zip(auxes, upstream)):
        cg, pg = backward_view(cloud, aux, g)
        total += cg
        pose_grads[v] = pg
    return total, pose_grads
