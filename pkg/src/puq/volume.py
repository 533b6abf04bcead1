"""Uncertainty volume: d-th root of the box volume, computed in the log domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 1e-10


@dataclass(frozen=True)
class VolumeConfig:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def volume_from_logsum(logsum, d: int, epsilon: float = DEFAULT_EPSILON):
    """Turn ``sum_i log(width_i + eps)`` over d axes into a clamped volume."""
    return np.maximum(np.exp(np.asarray(logsum) / d) - epsilon, 0.0)


def uncertainty_volume(widths, vcfg: VolumeConfig | None = None, dim: int | None = None):
    """Volume of a box with the given widths along the last axis.

    ``dim`` pads with zero-width axes up to that dimension (unused axes).
    """
    eps = (vcfg or VolumeConfig()).epsilon
    w = np.asarray(widths, dtype=np.float64)
    if not np.isfinite(w).all():
        raise ValueError("widths must be finite")
    if (w < 0).any():
        raise ValueError("widths must be nonnegative")
    k = w.shape[-1]
    d = k if dim is None else dim
    if d < k or d < 1:
        raise ValueError(f"cannot pad {k} widths to dimension {d}")
    logsum = np.log(w + eps).sum(axis=-1) + (d - k) * np.log(eps)
    out = volume_from_logsum(logsum, d, eps)
    return float(out) if out.ndim == 0 else out
