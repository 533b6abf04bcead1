"""Learn-then-Test machinery: p-values for bounded losses and FWER control."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import xlogy
from scipy.stats import binom


def _h1(a, b):
    return xlogy(a, a / b) + xlogy(1 - a, (1 - a) / (1 - b))


def hb_pvalue(mean_loss, n: int, level):
    """Hoeffding-Bentkus p-value for the null ``E[loss] > level``.

    Losses must lie in [0, 1]. Accepts scalars or arrays (broadcast together).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    m = np.clip(np.asarray(mean_loss, dtype=np.float64), 0.0, 1.0)
    lv = np.asarray(level, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        hoeffding = np.exp(-n * _h1(np.minimum(m, lv), lv))
        # the 1e-9 guards against n * mean landing a hair above an integer
        k = np.ceil(n * m - 1e-9)
        bentkus = math.e * binom.cdf(k, n, lv)
    p = np.minimum(np.minimum(hoeffding, bentkus), 1.0)
    # A loss bounded by 1 can never have mean above a level >= 1.
    p = np.where(lv >= 1.0, 0.0, p)
    return float(p) if p.ndim == 0 else p


def wsr_pvalue(losses, level, delta: float = 0.1):
    """Betting (Waudby-Smith--Ramdas) p-value for the null ``E[loss] >= level``.

    ``losses`` has shape ``(n,)`` or ``(n, P)`` with values in [0, 1]; columns are
    independent tests. Unlike :func:`hb_pvalue` it adapts to the loss variance,
    which matters for continuous losses that concentrate well below ``level``.
    The bet sizes depend only on past losses (and on ``delta``, which tunes
    power for tests run at that level), so the wealth process is a
    nonnegative supermartingale under the null and Ville's inequality applies.
    """
    x = np.clip(np.asarray(losses, dtype=np.float64), 0.0, 1.0)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n = x.shape[0]
    if n < 1:
        raise ValueError("need at least one loss")
    lv = np.broadcast_to(np.asarray(level, dtype=np.float64), x.shape[1:])
    t = np.arange(1, n + 1)[:, None]
    mu_hat = (np.cumsum(x, axis=0) + 0.5) / (t + 1)
    var_hat = (np.cumsum((x - mu_hat) ** 2, axis=0) + 0.25) / (t + 1)
    prev_var = np.vstack([np.full((1, x.shape[1]), 0.25), var_hat[:-1]])
    bet = np.minimum(np.sqrt(2 * np.log(1 / delta) / (n * prev_var)), 1.0)
    log_wealth = np.cumsum(np.log1p(-bet * (x - lv)), axis=0)
    p = np.minimum(1.0, np.exp(-np.maximum(log_wealth.max(axis=0), 0.0)))
    p = np.where(lv >= 1.0, 0.0, p)
    return float(p[0]) if squeeze else p


def bonferroni_select(pvalues, delta: float) -> np.ndarray:
    """Indices with ``p <= delta / len(pvalues)``."""
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty grid")
    return np.flatnonzero(p <= delta / p.size)


def fixed_sequence_select(pvalues, delta: float) -> np.ndarray:
    """Longest prefix with every ``p <= delta``.

    ``pvalues`` must be ordered from the most to the least conservative
    parameter (for interval scaling: decreasing scale).
    """
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    fails = np.flatnonzero(p > delta)
    stop = fails[0] if fails.size else p.size
    return np.arange(stop)


def chained_select(pvalues, delta: float) -> np.ndarray:
    """Bonferroni across chains, fixed-sequence testing within each chain.

    ``pvalues`` has shape ``(C, L)``; each row is tested in column order at level
    ``delta / C``. Returns flat (row-major) indices of the rejected nulls.
    """
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ValueError("expected a nonempty (chains, length) array")
    C, L = p.shape
    fails = p > delta / C
    stop = np.where(fails.any(axis=1), fails.argmax(axis=1), L)
    keep = np.arange(L)[None, :] < stop[:, None]
    return np.flatnonzero(keep)


def multi_risk_pvalue(p1, p2):
    """p-value for rejecting both nulls at once (intersection-union test)."""
    return np.maximum(p1, p2)
