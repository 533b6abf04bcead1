"""Approximation phase: per-instance mean, principal axes and raw bounds.

Everything works on batches of instances. A :class:`PrincipalBasis` holds either
a single instance (arrays without the leading axis) or ``N`` instances stacked
along axis 0; use :func:`approximate` / :func:`approximate_batch` respectively.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .core import DataError, ShapeError

log = logging.getLogger(__name__)

BasisKind = Literal["principal-components", "standard-basis"]


def empirical_quantile(values, q: float, axis: int = -1):
    """Smallest element z with ``#{v <= z} / N >= q``.

    Vectorised along ``axis``; ``q = 0`` gives the minimum, ``q = 1`` the maximum.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[axis]
    if n == 0:
        raise ValueError("empirical_quantile of an empty list")
    idx = int(np.argmax(np.arange(1, n + 1) / n >= q))
    out = np.take(np.sort(v, axis=axis), idx, axis=axis)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PrincipalBasis:
    """Approximation-phase output.

    ``components`` has orthonormal columns (shape ``(..., d, K)``); ``lo``/``hi``
    are the raw bounds of the centred projections, with ``lo <= 0 <= hi``.
    """

    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    weights: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    alpha_used: float
    kind: BasisKind = "principal-components"

    @property
    def dim(self) -> int:
        return self.components.shape[-2]

    @property
    def K(self) -> int:
        return self.components.shape[-1]

    @property
    def batched(self) -> bool:
        return self.mean.ndim == 2

    def __len__(self):
        if not self.batched:
            raise TypeError("single-instance basis has no length")
        return self.mean.shape[0]

    def __getitem__(self, i) -> "PrincipalBasis":
        if not self.batched:
            raise TypeError("single-instance basis is not indexable")
        return replace(self, mean=self.mean[i], components=self.components[i],
                       singular_values=self.singular_values[i], weights=self.weights[i],
                       lo=self.lo[i], hi=self.hi[i])


def _weights(sv: np.ndarray) -> np.ndarray:
    energy = sv**2
    total = energy.sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, energy / safe, 0.0)


def _check_stacks(stacks: np.ndarray) -> np.ndarray:
    stacks = np.asarray(stacks, dtype=np.float64)
    if stacks.ndim != 3:
        raise ShapeError(f"expected (N, n, d) stacks, got shape {stacks.shape}")
    if stacks.shape[1] < 1:
        raise ShapeError("stacks need at least one sample")
    if not np.isfinite(stacks).all():
        raise ValueError("stack contains non-finite values")
    return stacks


def approximate_batch(stacks, K: int, alpha: float) -> PrincipalBasis:
    """Batched approximation over ``stacks`` of shape ``(N, n, d)``."""
    stacks = _check_stacks(stacks)
    N, n, d = stacks.shape
    if not 1 <= K <= min(n, d):
        raise ValueError(f"K={K} must satisfy 1 <= K <= min(n_samples={n}, d={d})")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    mean = stacks.mean(axis=1)
    centered = stacks - mean[:, None, :]
    # Centred sample matrix is d x n; its left singular vectors are the PCs.
    u, s, _ = np.linalg.svd(np.swapaxes(centered, 1, 2), full_matrices=False)
    u, s = u[:, :, :K], s[:, :K]
    tol = s[:, :1] * max(n, d) * np.finfo(float).eps
    s = np.where(s > tol, s, 0.0)

    # Sign fix: largest-magnitude entry of each column is nonnegative.
    pick = np.argmax(np.abs(u), axis=1)
    sign = np.sign(np.take_along_axis(u, pick[:, None, :], axis=1))
    u = u * np.where(sign == 0, 1.0, sign)

    proj = np.einsum("bnd,bdk->bkn", centered, u)
    lo = empirical_quantile(proj, alpha / 2)
    hi = empirical_quantile(proj, 1 - alpha / 2)
    lo, hi = _anchor(lo, hi, s > 0)
    return PrincipalBasis(mean, u, s, _weights(s), lo, hi, float(alpha))


def _anchor(lo, hi, live):
    # Intervals must contain the centre so that they grow monotonically with scale.
    lo = np.where(live, np.minimum(lo, 0.0), 0.0)
    hi = np.where(live, np.maximum(hi, 0.0), 0.0)
    return lo, hi


def approximate(stack, K: int, alpha: float) -> PrincipalBasis:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2:
        raise ShapeError(f"expected an (n, d) stack, got shape {stack.shape}")
    return approximate_batch(stack[None], K, alpha)[0]


def pixelwise_baseline_batch(stacks, alpha: float) -> PrincipalBasis:
    """Standard-basis intervals from per-coordinate sample quantiles."""
    stacks = _check_stacks(stacks)
    N, n, d = stacks.shape
    mean = stacks.mean(axis=1)
    centered = stacks - mean[:, None, :]
    lo = empirical_quantile(centered, alpha / 2, axis=1)
    hi = empirical_quantile(centered, 1 - alpha / 2, axis=1)
    spread = centered.std(axis=1)
    lo, hi = _anchor(lo, hi, np.ones_like(lo, dtype=bool))
    comps = np.broadcast_to(np.eye(d), (N, d, d)).copy()
    return PrincipalBasis(mean, comps, spread, np.full((N, d), 1.0 / d), lo, hi,
                          float(alpha), kind="standard-basis")


def pixelwise_baseline(stack, alpha: float) -> PrincipalBasis:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2:
        raise ShapeError(f"expected an (n, d) stack, got shape {stack.shape}")
    return pixelwise_baseline_batch(stack[None], alpha)[0]


def project(basis: PrincipalBasis, y) -> np.ndarray:
    """Coordinates of ``y - mean`` along each retained axis."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != basis.mean.shape:
        raise ShapeError(f"y has shape {y.shape}, basis mean has {basis.mean.shape}")
    return np.einsum("...dk,...d->...k", basis.components, y - basis.mean)


def reconstruct(basis: PrincipalBasis, coefficients, k: int) -> np.ndarray:
    if not 0 <= k <= basis.K:
        raise ValueError(f"k={k} out of range 0..{basis.K}")
    c = np.asarray(coefficients, dtype=np.float64)[..., :k]
    return basis.mean + np.einsum("...dk,...k->...d", basis.components[..., :k], c)


# ---------------------------------------------------------------------------
# Basis files: JSON manifest + raw little-endian f64 blob

_FIELDS = ("mean", "components", "singular_values", "weights", "lo", "hi")


def save_basis(basis: PrincipalBasis, path, instance_id=None, extra: dict | None = None) -> dict:
    if basis.batched:
        raise ValueError("save_basis takes a single-instance basis")
    path = Path(path)
    payload = b"".join(np.ascontiguousarray(getattr(basis, f), dtype="<f8").tobytes()
                       for f in _FIELDS)
    blob = path.with_suffix(".bin")
    blob.write_bytes(payload)
    manifest = {
        "dtype": "f64", "endianness": "little", "dim": basis.dim, "K": basis.K,
        "kind": basis.kind, "alpha_used": basis.alpha_used, "layout": list(_FIELDS),
        "blob": blob.name, "sha256": hashlib.sha256(payload).hexdigest(),
    }
    if instance_id is not None:
        manifest["instance_id"] = instance_id
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_basis(path) -> PrincipalBasis:
    path = Path(path)
    try:
        m = json.loads(path.read_text())
        payload = (path.parent / m["blob"]).read_bytes()
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read basis {path}: {exc}") from exc
    if hashlib.sha256(payload).hexdigest() != m.get("sha256"):
        raise DataError(f"{path}: blob checksum mismatch")
    d, K = int(m["dim"]), int(m["K"])
    sizes = {"mean": d, "components": d * K, "singular_values": K, "weights": K, "lo": K, "hi": K}
    if len(payload) != 8 * sum(sizes.values()):
        raise DataError(f"{path}: blob size does not match dim={d}, K={K}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    parts, off = {}, 0
    for f in _FIELDS:
        parts[f] = flat[off:off + sizes[f]]
        off += sizes[f]
    parts["components"] = parts["components"].reshape(d, K)
    if not all(np.isfinite(v).all() for v in parts.values()):
        raise DataError(f"{path}: non-finite values")
    return PrincipalBasis(**parts, alpha_used=float(m["alpha_used"]), kind=m["kind"])


def stack_bases(bases: list[PrincipalBasis]) -> PrincipalBasis:
    """Combine single-instance bases that share d and K into one batch."""
    if not bases:
        raise ValueError("no bases to stack")
    first = bases[0]
    return PrincipalBasis(
        *(np.stack([getattr(b, f) for b in bases]) for f in _FIELDS),
        alpha_used=first.alpha_used, kind=first.kind,
    )
