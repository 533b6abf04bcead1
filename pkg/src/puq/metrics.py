"""Evaluation of calibrated regions on held-out data and replication summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .approximation import PrincipalBasis
from .calibration import (
    CalibrationResult,
    _centered_bounds,
    _coefficients,
    _misses,
    _reconstruction_table,
    adaptive_k,
)
from .volume import VolumeConfig, uncertainty_volume, volume_from_logsum

__all__ = [
    "VolumeConfig", "uncertainty_volume", "RiskReport", "InstanceMetrics", "instance_metrics",
    "evaluate", "summarize", "guarantee_verdict", "volume_map", "write_volume_map_csv",
    "deviation_diagnostics",
]


@dataclass
class InstanceMetrics:
    """Per-test-instance arrays behind a :class:`RiskReport`."""

    coverage: np.ndarray
    reconstruction: np.ndarray
    volume: np.ndarray
    interval_active: np.ndarray
    interval_padded: np.ndarray
    khat: np.ndarray


def instance_metrics(basis: PrincipalBasis, ys, result: CalibrationResult) -> InstanceMetrics:
    """Apply the calibrated parameters of ``result`` to a batch of test bases."""
    if result.abstained:
        raise ValueError("cannot evaluate an abstained calibration")
    if not basis.batched:
        raise ValueError("instance_metrics needs a batched basis")
    ys = np.asarray(ys, dtype=np.float64)
    if ys.shape != basis.mean.shape:
        raise ValueError(f"test targets {ys.shape} do not match bases {basis.mean.shape}")
    if basis.dim != result.dim:
        raise ValueError(f"basis dim {basis.dim} != calibrated dim {result.dim}")
    n, d, K = basis.mean.shape[0], basis.dim, basis.K
    eps = result.epsilon
    if result.method in ("da-puq", "rda-puq"):
        khat = np.asarray(adaptive_k(basis.weights, result.lambda1))
        recon = np.take_along_axis(_reconstruction_table(basis, ys, result.risk.q),
                                   khat[:, None], axis=-1)[:, 0]
    else:
        khat = np.full(n, K)
        yc = ys - basis.mean
        coef = np.einsum("ndk,nd->nk", basis.components, yc)
        resid = np.abs(np.einsum("ndk,nk->nd", basis.components, coef) - yc)
        recon = np.sort(resid, axis=1)[:, int(np.argmax(np.arange(1, d + 1) / d >= result.risk.q))]
    lower, upper = _centered_bounds(basis, [result.lambda2])
    lower, upper = lower[:, 0], upper[:, 0]
    live = np.arange(K)[None, :] < khat[:, None]
    miss = _misses(_coefficients(basis, ys), lower[:, None], upper[:, None])[:, 0]
    coverage = (basis.weights * miss * live).sum(axis=1)
    widths = np.where(live, upper - lower, 0.0)
    logsum = np.where(live, np.log(widths + eps), 0.0).sum(axis=1) + (d - khat) * np.log(eps)
    return InstanceMetrics(
        coverage=coverage,
        reconstruction=recon,
        volume=volume_from_logsum(logsum, d, eps),
        interval_active=widths.sum(axis=1) / khat,
        interval_padded=widths.sum(axis=1) / d,
        khat=khat,
    )


def _stat(x) -> dict:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(x.mean()), "std": float(x.std())}


@dataclass
class RiskReport:
    method: str
    n_test: int
    abstained: bool
    K: int
    K_hat: int | None = None
    chosen: dict | None = None
    coverage_risk: dict = field(default_factory=dict)
    reconstruction_risk: dict = field(default_factory=dict)
    uncertainty_volume: dict = field(default_factory=dict)
    interval_size_active: dict = field(default_factory=dict)
    interval_size_padded: dict = field(default_factory=dict)
    khat: dict = field(default_factory=dict)
    replicates: int = 1

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(basis: PrincipalBasis, ys, result: CalibrationResult) -> RiskReport:
    """Single-split evaluation of a calibrated pipeline on test bases."""
    if result.abstained:
        return RiskReport(method=result.method, n_test=len(ys), abstained=True, K=result.K)
    m = instance_metrics(basis, ys, result)
    values, counts = np.unique(m.khat, return_counts=True)
    return RiskReport(
        method=result.method,
        n_test=int(m.coverage.size),
        abstained=False,
        K=result.K,
        K_hat=result.K_hat,
        chosen=result.chosen(),
        coverage_risk=_stat(m.coverage),
        reconstruction_risk=_stat(m.reconstruction),
        uncertainty_volume=_stat(m.volume),
        interval_size_active=_stat(m.interval_active),
        interval_size_padded=_stat(m.interval_padded),
        khat={**_stat(m.khat), "median": float(np.median(m.khat)),
              "histogram": {int(v): int(c) for v, c in zip(values, counts)}},
    )


def guarantee_verdict(reports: list[RiskReport], alpha: float, delta: float,
                      beta: float | None = None) -> dict:
    """Compare the fraction of replicates violating the risk caps with δ plus MC slack.

    Abstained replicates certify nothing and so never count as violations.
    """
    R = len(reports)
    if R == 0:
        return {"verdict": "insufficient", "replicates": 0, "violations": 0,
                "violation_fraction": None, "bound": None, "abstentions": 0}
    violations = 0
    for r in reports:
        if r.abstained:
            continue
        bad = r.coverage_risk["mean"] > alpha
        if beta is not None:
            bad = bad or r.reconstruction_risk["mean"] > beta
        violations += bool(bad)
    frac = violations / R
    bound = delta + 2 * math.sqrt(delta * (1 - delta) / R)
    return {
        "verdict": "pass" if frac <= bound else "fail",
        "replicates": R,
        "violations": violations,
        "violation_fraction": frac,
        "bound": bound,
        "abstentions": sum(r.abstained for r in reports),
    }


def summarize(reports: list[RiskReport]) -> dict:
    """Mean/std across replicates of each per-replicate mean."""
    live = [r for r in reports if not r.abstained]
    out = {"replicates": len(reports), "abstentions": len(reports) - len(live)}
    for key in ("coverage_risk", "reconstruction_risk", "uncertainty_volume",
                "interval_size_active", "interval_size_padded", "khat"):
        out[key] = _stat([getattr(r, key)["mean"] for r in live])
    k_hats = [r.K_hat for r in live if r.K_hat is not None]
    out["K_hat"] = _stat(k_hats) if k_hats else None
    return out


def volume_map(volumes, tile_index, grid_shape: tuple[int, int]) -> np.ndarray:
    """Mean volume per tile position.

    ``tile_index`` gives the row-major tile position of each volume entry.
    """
    volumes = np.asarray(volumes, dtype=float)
    tile_index = np.asarray(tile_index, dtype=int)
    gh, gw = grid_shape
    sums = np.bincount(tile_index, weights=volumes, minlength=gh * gw)
    counts = np.bincount(tile_index, minlength=gh * gw)
    with np.errstate(invalid="ignore", divide="ignore"):
        grid = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return grid.reshape(gh, gw)


def write_volume_map_csv(grid: np.ndarray, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tile_row", "tile_col", "volume"])
        for (i, j), v in np.ndenumerate(grid):
            w.writerow([i, j, repr(float(v))])


def deviation_diagnostics(basis: PrincipalBasis, y, scale: float) -> dict:
    """Per-axis distance outside the scaled box, its indicator, and the weighted energy."""
    coef = _coefficients(basis, y)
    lower, upper = _centered_bounds(basis, [scale])
    lower, upper = lower[..., 0, :], upper[..., 0, :]
    h = np.maximum(coef - upper, 0.0) + np.maximum(-coef + lower, 0.0)
    b = (h > 0).astype(float)
    energy = (basis.singular_values**2 * h**2).sum(axis=-1)
    return {"h": h, "b": b, "energy": energy}
