"""Image quality and trajectory metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Pose
from .errors import DegenerateGeometry, LengthMismatch, ShapeMismatch, TooSmall

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over axes 0 and 1, 'valid' positions only."""
    rows = sliding_window_view(x, SSIM_WINDOW, axis=0) @ _KERNEL
    return sliding_window_view(rows, SSIM_WINDOW, axis=1) @ _KERNEL


def _filter_adjoint(g: np.ndarray) -> np.ndarray:
    pad = SSIM_WINDOW - 1
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (g.ndim - 2)
    # the kernel is symmetric, so the adjoint is a full-size filtering
    return _filter_valid(np.pad(g, widths))


def _as_hwc(x: np.ndarray) -> np.ndarray:
    return x[..., None] if x.ndim == 2 else x


def ssim_and_grad(a, b, need_grad: bool = True) -> tuple[float, np.ndarray | None]:
    """Mean SSIM of ``a`` against ``b`` and its gradient with respect to ``a``.

    Gaussian 11x11 window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1,
    averaged over valid window positions and channels.
    """
    a, b = _check_pair(a, b)
    shape = a.shape
    a, b = _as_hwc(a), _as_hwc(b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise TooSmall(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px window")
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _filter_valid(a), _filter_valid(b)
    exx, eyy, exy = _filter_valid(a * a), _filter_valid(b * b), _filter_valid(a * b)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not need_grad:
        return value, None
    n = smap.size
    denom = b1 * b2
    d_mx = (2 * my * a2 - 2 * my * a1) / denom - smap * 2 * mx / b1 + smap * 2 * mx / b2
    d_exx = -smap / b2
    d_exy = 2 * a1 / denom
    grad = (
        _filter_adjoint(d_mx)
        + 2 * a * _filter_adjoint(d_exx)
        + b * _filter_adjoint(d_exy)
    ) / n
    return value, grad.reshape(shape)


def ssim(a, b) -> float:
    return ssim_and_grad(a, b, need_grad=False)[0]


@dataclass
class Trajectory:
    poses: list[Pose]
    indices: list[int] | None = None

    def __post_init__(self):
        if self.indices is None:
            self.indices = list(range(len(self.poses)))
        if len(self.indices) != len(self.poses):
            raise LengthMismatch("one index per pose required")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("trajectory indices must be strictly increasing")

    def positions(self) -> np.ndarray:
        return np.array([p.center() for p in self.poses])


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimizing ``sum |dst - (s R src + t)|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    n = len(src)
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    var_s = float((xs**2).sum() / n)
    if not with_scale:
        scale = 1.0
    elif var_s == 0.0:
        scale = 0.0
    else:
        scale = float(np.trace(np.diag(d) @ sign) / var_s)
    return scale, rot, mu_d - scale * rot @ mu_s


def ate(estimated: Trajectory, reference: Trajectory, with_scale: bool = True) -> float:
    """RMSE of camera centers after similarity alignment of estimate onto reference."""
    if len(estimated.poses) != len(reference.poses):
        raise LengthMismatch(f"{len(estimated.poses)} vs {len(reference.poses)} poses")
    if list(estimated.indices) != list(reference.indices):
        raise LengthMismatch("frame indices differ")
    if len(reference.poses) < 2:
        raise LengthMismatch("ATE needs at least two poses")
    est, ref = estimated.positions(), reference.positions()
    if np.allclose(ref, ref[0], atol=1e-12, rtol=0):
        raise DegenerateGeometry("reference positions are coincident")
    s, rot, t = umeyama(est, ref, with_scale)
    aligned = s * est @ rot.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - ref) ** 2, axis=1))))


def write_report(path, scene: str, psnrs, ssims, ate_value: float | None = None) -> None:
    """CSV with one row per frame plus a ``mean`` summary row.

    LPIPS is not computed; its column reads ``n/a``.
    """
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["scene", "frame", "psnr", "ssim", "lpips", "ate"])
        for i, (p, s) in enumerate(zip(psnrs, ssims)):
            out.writerow([scene, i, f"{p:.4f}", f"{s:.6f}", "n/a", ""])
        ate_cell = "" if ate_value is None else f"{ate_value:.6g}"
        out.writerow([scene, "mean", f"{np.mean(psnrs):.4f}", f"{np.mean(ssims):.6f}", "n/a", ate_cell])
