"""Measurement-domain losses and Gaussian regularizers."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .gaussians import GaussianCloud, sigmoid
from .metrics import ssim_and_grad
from .sci_forward import MaskStack, Measurement, modulate_sum

DEFAULT_LAMBDA_DSSIM = 0.2


def synthesize_from_renders(frames, masks: MaskStack) -> Measurement:
    """Noise-free measurement ``sum_i X_i * M_i`` from rendered views."""
    return Measurement(modulate_sum(frames, masks))


def renders_grad_from_measurement(grad_y: np.ndarray, masks: MaskStack) -> np.ndarray:
    """Pull a measurement gradient back to each rendered frame: ``M_i * dL/dY``."""
    return masks.values[..., None] * grad_y[None]


def measurement_loss(
    y_hat, y, mode: str = "l1_dssim", lambda_dssim: float = DEFAULT_LAMBDA_DSSIM, scale: float = 1.0
) -> tuple[float, np.ndarray]:
    """Photometric loss between a synthesized and a captured measurement.

    Both inputs are multiplied by ``scale`` (use ``1 / N_I`` to bring an
    accumulated measurement into [0, 1]) before the loss. Returns the value
    and the gradient with respect to the unscaled ``y_hat``.
    """
    a = np.asarray(getattr(y_hat, "image", y_hat), dtype=np.float64) * scale
    b = np.asarray(getattr(y, "image", y), dtype=np.float64) * scale
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    diff = a - b
    n = diff.size
    if mode == "mse":
        return float(np.mean(diff**2)), 2.0 * diff / n * scale
    if mode != "l1_dssim":
        raise ValueError(f"unknown loss mode {mode!r}")
    l1 = float(np.mean(np.abs(diff)))
    g = np.sign(diff) / n
    if lambda_dssim > 0:
        s, gs = ssim_and_grad(a, b)
        value = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s) / 2
        g = (1 - lambda_dssim) * g - lambda_dssim * gs / 2
    else:
        value = l1
    return float(value), g * scale


def regularizers(cloud: GaussianCloud, lambda_o: float, lambda_s: float):
    """``lambda_o * sum(o) + lambda_s * sum(scales)`` and its gradients.

    The scale term sums square roots of covariance eigenvalues, which are the
    scales themselves. Returns ``(value, grad_opacity_logits, grad_log_scales)``.
    """
    o = sigmoid(cloud.opacity_logits)
    s = np.exp(cloud.log_scales)
    value = lambda_o * float(np.sum(np.abs(o))) + lambda_s * float(np.sum(np.abs(s)))
    return value, lambda_o * o * (1 - o), lambda_s * s
