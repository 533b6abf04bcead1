"""Calibration of PUQ uncertainty regions.

Three procedures are implemented on top of batched approximation output:

* exact (``e_puq_calibrate``): all d axes, one interval scale λ, coverage risk only;
* dimension-adaptive (``da_puq_calibrate``): the first k̂(x; λ1) of K axes are kept,
  controlling both reconstruction and coverage risk;
* reduced dimension-adaptive (``rda_puq_calibrate``): additionally picks how
  many samples/axes K̂ = ⌊K_max·λ3⌋ are computed per instance.

Interval bounds are ``[centre + λ·lo, centre + λ·hi]`` in the coordinates of each
axis; since ``lo <= 0 <= hi`` they grow monotonically with λ.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .approximation import PrincipalBasis, approximate_batch, empirical_quantile
from .core import ConfigError, ShapeError
from .ltt import chained_select, fixed_sequence_select, hb_pvalue, multi_risk_pvalue, wsr_pvalue
from .volume import DEFAULT_EPSILON, volume_from_logsum

METHODS = ("e-puq", "da-puq", "rda-puq", "pixelwise-baseline")


@dataclass(frozen=True)
class RiskConfig:
    alpha: float = 0.1
    beta: float = 0.05
    q: float = 0.9
    delta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "q", "delta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")


def default_grid1() -> tuple[float, ...]:
    return tuple(np.linspace(0.5, 1.0, 50).tolist())


def default_grid2() -> tuple[float, ...]:
    return tuple(np.geomspace(0.25, 8.0, 101).tolist())


def default_grid3() -> tuple[float, ...]:
    return tuple(round(0.05 * i, 10) for i in range(1, 21))


@dataclass(frozen=True)
class LambdaGrid:
    grid1: tuple[float, ...] = field(default_factory=default_grid1)
    grid2: tuple[float, ...] = field(default_factory=default_grid2)
    grid3: tuple[float, ...] = field(default_factory=default_grid3)

    def __post_init__(self):
        for name in ("grid1", "grid2", "grid3"):
            g = np.asarray(getattr(self, name), dtype=float)
            if g.ndim != 1 or g.size == 0 or not np.isfinite(g).all():
                raise ConfigError(f"{name} must be a nonempty list of finite values")
            if (np.diff(g) <= 0).any():
                raise ConfigError(f"{name} must be strictly ascending")
            object.__setattr__(self, name, tuple(float(v) for v in g))
        if not (0 <= self.grid1[0] and self.grid1[-1] <= 1):
            raise ConfigError("grid1 thresholds must lie in [0, 1]")
        if self.grid2[0] <= 0:
            raise ConfigError("grid2 scales must be positive")
        if not (0 < self.grid3[0] and self.grid3[-1] <= 1):
            raise ConfigError("grid3 fractions must lie in (0, 1]")


# ---------------------------------------------------------------------------
# Intervals and losses


@dataclass(frozen=True)
class ScaledIntervals:
    """Absolute per-axis bounds; axes at index >= active_k are unused."""

    lower: np.ndarray
    upper: np.ndarray
    scale: float
    active_k: int

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower


def clamp_to_dynamic_range(lower, upper, low: float = 0.0, high: float = 1.0):
    return np.clip(lower, low, high), np.clip(upper, low, high)


def _centered_bounds(basis: PrincipalBasis, scales):
    """Bounds relative to the centre, shape ``(..., G, K)`` for G scales."""
    s = np.asarray(scales, dtype=np.float64)[:, None]
    lower = s * basis.lo[..., None, :]
    upper = s * basis.hi[..., None, :]
    if basis.kind == "standard-basis":
        centre = basis.mean[..., None, :]
        lo_abs, hi_abs = clamp_to_dynamic_range(centre + lower, centre + upper)
        lower, upper = lo_abs - centre, hi_abs - centre
    return lower, upper


def scaled_intervals(basis: PrincipalBasis, scale: float, active_k: int | None = None) -> ScaledIntervals:
    k = basis.K if active_k is None else active_k
    if not 0 <= k <= basis.K:
        raise ValueError(f"active_k={k} out of range 0..{basis.K}")
    lower, upper = _centered_bounds(basis, [scale])
    centre = np.einsum("...dk,...d->...k", basis.components, basis.mean)
    return ScaledIntervals(centre + lower[..., 0, :], centre + upper[..., 0, :], float(scale), k)


def _coefficients(basis: PrincipalBasis, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != basis.mean.shape:
        raise ShapeError(f"y has shape {y.shape}, basis mean has {basis.mean.shape}")
    return np.einsum("...dk,...d->...k", basis.components, y - basis.mean)


def _misses(coef, lower, upper):
    c = coef[..., None, :]
    return (c < lower) | (c > upper)


def coverage_loss(basis: PrincipalBasis, y, scale: float, active_k=None):
    """Weighted fraction of axes whose projected ground truth falls outside.

    Weights are not renormalised when only ``active_k < K`` axes are used.
    """
    coef = _coefficients(basis, y)
    lower, upper = _centered_bounds(basis, [scale])
    miss = _misses(coef, lower, upper)[..., 0, :]
    k = basis.K if active_k is None else np.asarray(active_k)
    if np.any(k > basis.K) or np.any(k < 0):
        raise ValueError("active_k out of range")
    live = np.arange(basis.K) < np.asarray(k)[..., None]
    out = (basis.weights * miss * live).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _reconstruction_table(basis: PrincipalBasis, ys, q: float) -> np.ndarray:
    """q-quantile of per-pixel error for k = 0..K retained axes, shape (..., K+1)."""
    yc = np.asarray(ys, dtype=np.float64) - basis.mean
    coef = np.einsum("...dk,...d->...k", basis.components, yc)
    parts = basis.components * coef[..., None, :]  # (..., d, K)
    partial = np.concatenate([np.zeros_like(yc)[..., None], np.cumsum(parts, axis=-1)], axis=-1)
    err = np.abs(partial - yc[..., None])
    return empirical_quantile(err, q, axis=-2)


def reconstruction_loss(basis: PrincipalBasis, y, k, q: float):
    """q-quantile over pixels of the error when y is rebuilt from k axes."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != basis.mean.shape:
        raise ShapeError(f"y has shape {y.shape}, basis mean has {basis.mean.shape}")
    if np.any(np.asarray(k) > basis.K) or np.any(np.asarray(k) < 0):
        raise ValueError("k out of range")
    table = _reconstruction_table(basis, y, q)
    out = np.take_along_axis(table, np.asarray(k)[..., None], axis=-1)[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def adaptive_k(weights, threshold):
    """Smallest k with cumulative weight >= threshold; K if no prefix reaches it.

    ``threshold`` may be an array, giving a trailing axis of results.
    """
    w = np.asarray(weights, dtype=np.float64)
    K = w.shape[-1]
    t = np.asarray(threshold, dtype=np.float64)
    csum = np.cumsum(w, axis=-1)
    reached = csum[..., None, :] >= t.reshape(-1)[:, None] if t.ndim else csum >= t
    first = np.argmax(reached, axis=-1) + 1
    k = np.where(reached.any(axis=-1), first, K)
    if t.ndim == 0:
        return int(k) if np.ndim(k) == 0 else k
    return k


# ---------------------------------------------------------------------------
# Results


@dataclass
class CalibrationResult:
    """Outcome of one calibration run.

    ``table`` holds one row per grid point (see :data:`TABLE_COLUMNS`); ``valid``
    indexes into those rows.
    """

    method: str
    risk: RiskConfig
    n_cal: int
    K: int
    dim: int
    epsilon: float
    table: dict
    valid: np.ndarray
    threshold: float
    chosen_index: int | None = None

    @property
    def abstained(self) -> bool:
        return self.chosen_index is None

    def _chosen(self, col):
        if self.abstained:
            return None
        v = self.table[col][self.chosen_index]
        return None if isinstance(v, float) and math.isnan(v) else v

    @property
    def lambda1(self):
        return self._chosen("lambda1")

    @property
    def lambda2(self):
        return self._chosen("lambda2")

    @property
    def lambda3(self):
        return self._chosen("lambda3")

    @property
    def K_hat(self):
        return self._chosen("K_used") if self.method == "rda-puq" else None

    @property
    def mean_volume(self):
        return self._chosen("mean_volume")

    @property
    def chosen_pvalue(self):
        return self._chosen("p_value")

    def chosen(self) -> dict | None:
        if self.abstained:
            return None
        out = {"index": self.chosen_index, "lambda1": self.lambda1, "lambda2": self.lambda2,
               "lambda3": self.lambda3, "K_used": self.K_used}
        if self.method in ("e-puq", "pixelwise-baseline"):
            out["lambda"] = self.lambda2
        return out

    @property
    def K_used(self):
        return self._chosen("K_used")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "abstained": self.abstained,
            "chosen": self.chosen(),
            "K": self.K,
            "K_hat": self.K_hat,
            "dim": self.dim,
            "n_cal": self.n_cal,
            "epsilon": self.epsilon,
            "risk": asdict(self.risk),
            "mean_volume": self.mean_volume,
            "threshold": self.threshold,
            "valid_set_size": int(self.valid.size),
            "valid": [int(i) for i in self.valid],
            "grid_size": len(self.table["lambda2"]),
        }

    def write(self, path, table_path=None):
        path = Path(path)
        payload = self.to_json()
        table_path = Path(table_path) if table_path else path.with_suffix(".grid.csv")
        payload["diagnostics"] = table_path.name
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        write_table_csv(self.table, table_path)

    @classmethod
    def read(cls, path) -> "CalibrationResult":
        path = Path(path)
        raw = json.loads(path.read_text())
        table = read_table_csv(path.parent / raw["diagnostics"])
        chosen = raw["chosen"]
        return cls(
            method=raw["method"], risk=RiskConfig(**raw["risk"]), n_cal=raw["n_cal"],
            K=raw["K"], dim=raw["dim"], epsilon=raw["epsilon"], table=table,
            valid=np.asarray(raw["valid"], dtype=int), threshold=raw["threshold"],
            chosen_index=None if chosen is None else chosen["index"],
        )


TABLE_COLUMNS = (
    "index", "lambda1", "lambda2", "lambda3", "K_used", "mean_recon_loss", "mean_cov_loss",
    "p_recon", "p_cov", "p_value", "valid", "mean_volume", "mean_khat", "mean_prefix_mass",
)
_INT_COLUMNS = {"index", "K_used", "valid"}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def write_table_csv(table: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in zip(*(table[c] for c in TABLE_COLUMNS)):
            w.writerow([int(v) if c in _INT_COLUMNS else repr(float(v))
                        for c, v in zip(TABLE_COLUMNS, row)])


def read_table_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: [int(r[c]) if c in _INT_COLUMNS else float(r[c]) for r in rows] for c in TABLE_COLUMNS}


def _select(table: dict, valid: np.ndarray):
    """Volume minimiser over ``valid``; ties go to smaller λ2, then λ1, then λ3."""
    if valid.size == 0:
        return None
    vol = np.asarray(table["mean_volume"])[valid]
    keys = [np.nan_to_num(np.asarray(table[c])[valid], nan=0.0) for c in ("lambda3", "lambda1", "lambda2")]
    order = np.lexsort((*keys, vol))
    return int(valid[order[0]])


def _make_table(n_rows, **cols) -> dict:
    table = {c: np.full(n_rows, np.nan) for c in TABLE_COLUMNS}
    table["index"] = np.arange(n_rows)
    for k, v in cols.items():
        table[k] = np.broadcast_to(np.asarray(v, dtype=float), (n_rows,)).copy()
    return table


def _finish(method, table, valid, threshold, risk, n, K, d, eps) -> CalibrationResult:
    table["valid"] = np.isin(np.arange(len(table["index"])), valid).astype(int)
    table["K_used"] = table["K_used"].astype(int)
    out = {c: [v.item() if hasattr(v, "item") else v for v in np.asarray(table[c])] for c in TABLE_COLUMNS}
    return CalibrationResult(method=method, risk=risk, n_cal=n, K=K, dim=d, epsilon=eps,
                             table=out, valid=np.asarray(valid, dtype=int), threshold=threshold,
                             chosen_index=_select(table, np.asarray(valid, dtype=int)))


# ---------------------------------------------------------------------------
# Procedures


def e_puq_calibrate(basis: PrincipalBasis, ys, grid: LambdaGrid, risk: RiskConfig,
                    epsilon: float = DEFAULT_EPSILON, method: str = "e-puq") -> CalibrationResult:
    """Exact calibration over all d axes, scanning ``grid.grid2``.

    Valid scales come from fixed-sequence testing from the largest λ down;
    the loss is nonincreasing in λ so no multiplicity correction is needed.
    Also used for the pixelwise baseline (``method="pixelwise-baseline"``).
    """
    if not basis.batched:
        raise ValueError("e_puq_calibrate needs a batched basis")
    n, d, K = basis.mean.shape[0], basis.dim, basis.K
    if K != d:
        raise ValueError(f"exact calibration needs K = d, got K={K}, d={d}")
    ys = np.asarray(ys, dtype=np.float64)
    scales = np.asarray(grid.grid2)
    coef = _coefficients(basis, ys)
    lower, upper = _centered_bounds(basis, scales)
    losses = np.einsum("ngk,nk->ng", _misses(coef, lower, upper), basis.weights)
    logsum = np.log(upper - lower + epsilon).sum(axis=-1)
    volumes = volume_from_logsum(logsum, d, epsilon).mean(axis=0)

    mean_loss = losses.mean(axis=0)
    p = hb_pvalue(mean_loss, n, risk.alpha)
    G = scales.size
    valid = np.sort(G - 1 - fixed_sequence_select(p[::-1], risk.delta))
    table = _make_table(G, lambda2=scales, K_used=K, mean_cov_loss=mean_loss, p_cov=p,
                        p_value=p, mean_volume=volumes, mean_khat=K, mean_prefix_mass=1.0)
    return _finish(method, table, valid, risk.delta, risk, n, K, d, epsilon)


def _da_grid(basis: PrincipalBasis, ys, grid1, grid2, risk: RiskConfig, epsilon: float,
             test_level: float) -> dict:
    """Mean losses and volumes over the (λ1, λ2) grid, arrays shaped (G1, G2)."""
    n, d, K = basis.mean.shape[0], basis.dim, basis.K
    g1, g2 = np.asarray(grid1), np.asarray(grid2)
    khat = adaptive_k(basis.weights, g1)  # (n, G1)
    rows = np.arange(n)[:, None]

    recon = _reconstruction_table(basis, ys, risk.q)  # (n, K+1)
    l1 = recon[rows, khat]  # (n, G1)

    coef = _coefficients(basis, ys)
    lower, upper = _centered_bounds(basis, g2)  # (n, G2, K)
    weighted = np.cumsum(_misses(coef, lower, upper) * basis.weights[:, None, :], axis=-1)
    logw = np.cumsum(np.log(upper - lower + epsilon), axis=-1)
    cols = np.arange(g2.size)[None, None, :]
    kidx = (khat - 1)[:, :, None]
    l2 = weighted[rows[:, :, None], cols, kidx]  # (n, G1, G2)
    logsum = logw[rows[:, :, None], cols, kidx] + (d - khat)[:, :, None] * np.log(epsilon)
    vol = volume_from_logsum(logsum, d, epsilon)
    mass = np.take_along_axis(np.cumsum(basis.weights, axis=-1), khat - 1, axis=-1)

    mean_l1 = l1.mean(axis=0)
    mean_l2 = l2.mean(axis=0)
    # Reconstruction losses are continuous and tightly concentrated, where HB is
    # far too loose; the betting p-value adapts to their variance. Errors are in
    # pixel units and get clipped to [0, 1] inside.
    p1 = wsr_pvalue(l1, risk.beta, delta=test_level)
    p2 = hb_pvalue(mean_l2, n, risk.alpha)
    G1, G2 = g1.size, g2.size
    return {
        "lambda1": np.repeat(g1, G2), "lambda2": np.tile(g2, G1),
        "mean_recon_loss": np.repeat(mean_l1, G2), "mean_cov_loss": mean_l2.ravel(),
        "p_recon": np.repeat(p1, G2), "p_cov": p2.ravel(),
        "p_value": multi_risk_pvalue(np.repeat(p1, G2), p2.ravel()),
        "mean_volume": vol.mean(axis=0).ravel(),
        "mean_khat": np.repeat(khat.mean(axis=0), G2),
        "mean_prefix_mass": np.repeat(mass.mean(axis=0), G2),
    }


def _chain_valid(p_value, G2: int, delta: float) -> np.ndarray:
    """Rows are laid out chain-major with λ2 ascending; chains are tested from
    the largest λ2 down, where coverage loss is smallest."""
    chains = np.asarray(p_value).reshape(-1, G2)[:, ::-1]
    flat = chained_select(chains, delta)
    c, j = np.divmod(flat, G2)
    return np.sort(c * G2 + (G2 - 1 - j))


def da_puq_calibrate(basis: PrincipalBasis, ys, grid: LambdaGrid, risk: RiskConfig,
                     epsilon: float = DEFAULT_EPSILON) -> CalibrationResult:
    """Dimension-adaptive calibration over (λ1, λ2).

    Each λ1 gets a share δ/|grid1| of the error budget and is tested as a
    fixed sequence over decreasing λ2.
    """
    if not basis.batched:
        raise ValueError("da_puq_calibrate needs a batched basis")
    n, d, K = basis.mean.shape[0], basis.dim, basis.K
    G1, G2 = len(grid.grid1), len(grid.grid2)
    level = risk.delta / G1
    cols = _da_grid(basis, ys, grid.grid1, grid.grid2, risk, epsilon, level)
    table = _make_table(G1 * G2, K_used=K, **cols)
    valid = _chain_valid(table["p_value"], G2, risk.delta)
    return _finish("da-puq", table, valid, level, risk, n, K, d, epsilon)


def reduced_k(K_max: int, fraction: float) -> int:
    return int(math.floor(K_max * fraction + 1e-9))


def rda_puq_calibrate(stacks, ys, K_max: int, grid: LambdaGrid, risk: RiskConfig,
                      epsilon: float = DEFAULT_EPSILON) -> CalibrationResult:
    """Reduced dimension-adaptive calibration over (λ1, λ2, λ3).

    For each λ3 the approximation is redone on the first ⌊K_max·λ3⌋ samples of
    each stack, keeping that many axes. Every (λ3, λ1) pair is one chain of
    the fixed-sequence test over λ2.
    """
    stacks = np.asarray(stacks, dtype=np.float64)
    n, n_samples, d = stacks.shape
    if not 1 <= K_max <= min(d, n_samples):
        raise ValueError(f"K_max={K_max} must satisfy 1 <= K_max <= min(d, n_samples)")
    parts = []
    level = risk.delta / (len(grid.grid1) * len(grid.grid3))
    for lam3 in grid.grid3:
        k_red = reduced_k(K_max, lam3)
        if k_red < 1:
            raise ValueError(f"λ3={lam3} gives fewer than one sample for K_max={K_max}")
        basis = approximate_batch(stacks[:, :k_red], k_red, risk.alpha)
        cols = _da_grid(basis, ys, grid.grid1, grid.grid2, risk, epsilon, level)
        cols["lambda3"] = np.full(cols["p_value"].size, lam3)
        cols["K_used"] = np.full(cols["p_value"].size, k_red)
        parts.append(cols)
    merged = {k: np.concatenate([c[k] for c in parts]) for k in parts[0]}
    P = merged["p_value"].size
    table = _make_table(P, **merged)
    valid = _chain_valid(table["p_value"], len(grid.grid2), risk.delta)
    return _finish("rda-puq", table, valid, level, risk, n, K_max, d, epsilon)
