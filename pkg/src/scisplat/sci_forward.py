"""SCI image formation: masks, measurement synthesis and normalization.

Images are float arrays of shape ``(H, W, C)``; a frame sequence is
``(N, H, W, C)``; masks are ``(N, H, W)`` and apply identically to every
color channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidRatio, ShapeMismatch


@dataclass
class MaskStack:
    values: np.ndarray
    nominal_or: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeMismatch(f"mask stack must be (N, H, W), got {self.values.shape}")
        if not 0.0 < self.nominal_or <= 1.0:
            raise InvalidRatio(f"overlapping ratio must be in (0, 1], got {self.nominal_or}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def overlapping_rate(self) -> np.ndarray:
        """Per-pixel fraction of frames in which the mask is on."""
        return self.values.mean(axis=0)

    def coverage(self) -> np.ndarray:
        return self.values.sum(axis=0)


@dataclass
class Measurement:
    image: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[..., None]


def _as_frames(frames) -> np.ndarray:
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ShapeMismatch(f"frames must be (N, H, W[, C]), got {arr.shape}")
    return arr


def generate_masks(h: int, w: int, n_frames: int, ratio: float, seed: int) -> MaskStack:
    """Binary masks with every cell independently on with probability ``ratio``.

    A counter-based generator (Philox) keyed by ``seed`` makes the stack a
    pure function of its arguments.
    """
    if not 0.0 < ratio <= 1.0:
        raise InvalidRatio(f"overlapping ratio must be in (0, 1], got {ratio}")
    if n_frames < 1:
        raise ShapeMismatch("need at least one frame")
    rng = np.random.Generator(np.random.Philox(seed))
    values = (rng.random((n_frames, h, w)) < ratio).astype(np.float64)
    return MaskStack(values, nominal_or=ratio, seed=seed)


def modulate_sum(frames: np.ndarray, masks: MaskStack) -> np.ndarray:
    """Noise-free accumulation ``sum_i X_i * M_i`` with shape checks."""
    frames = _as_frames(frames)
    if frames.shape[0] != masks.n_frames:
        raise ShapeMismatch(f"{frames.shape[0]} frames vs {masks.n_frames} masks")
    if frames.shape[1:3] != masks.shape:
        raise ShapeMismatch(f"frame size {frames.shape[1:3]} vs mask size {masks.shape}")
    # sequential accumulation in frame order keeps results bit-reproducible
    y = np.zeros(frames.shape[1:])
    for x, m in zip(frames, masks.values):
        y += x * m[..., None]
    return y


def synthesize_measurement(
    frames, masks: MaskStack, noise_sigma: float = 0.0, seed: int = 0
) -> Measurement:
    y = modulate_sum(frames, masks)
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.Philox(seed))
        y = np.maximum(y + rng.normal(0.0, noise_sigma, size=y.shape), 0.0)
    return Measurement(y, noise_sigma=float(noise_sigma))


def normalize_measurement(y: Measurement, masks: MaskStack) -> tuple[np.ndarray, np.ndarray]:
    """Divide the measurement by the per-pixel mask sum.

    Returns ``(normalized, valid)``; pixels no mask ever samples are 0 with
    ``valid`` False.
    """
    if y.image.shape[:2] != masks.shape:
        raise ShapeMismatch(f"measurement {y.image.shape[:2]} vs masks {masks.shape}")
    total = masks.coverage()
    valid = total > 0
    out = np.zeros_like(y.image)
    np.divide(y.image, total[..., None], out=out, where=valid[..., None])
    return out, valid
