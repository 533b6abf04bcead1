import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from puq.approximation import (
    approximate,
    approximate_batch,
    empirical_quantile,
    load_basis,
    pixelwise_baseline,
    project,
    reconstruct,
    save_basis,
    stack_bases,
)
from puq.core import DataError


def test_quantile_examples():
    assert empirical_quantile([1, 2, 3, 4], 1.0) == 4
    assert empirical_quantile([1, 2, 3, 4], 0.5) == 2
    assert empirical_quantile([5, 5, 5], 0.3) == 5
    assert empirical_quantile([3, 1, 2], 0.0) == 1
    with pytest.raises(ValueError):
        empirical_quantile([], 0.5)
    with pytest.raises(ValueError):
        empirical_quantile([1.0], 1.5)


def test_quantile_along_axis():
    v = np.array([[4.0, 1.0, 3.0], [0.0, -1.0, 2.0]])
    assert empirical_quantile(v, 0.5, axis=1).tolist() == [3.0, 0.0]
    assert empirical_quantile(v, 0.5, axis=0).tolist() == [0.0, -1.0, 2.0]


def test_rank_one_hand_example():
    b = approximate(np.array([[1.0, 1.0], [-1.0, -1.0]]), 2, 0.1)
    assert np.allclose(b.mean, 0)
    assert np.allclose(b.components[:, 0], np.array([1, 1]) / math.sqrt(2))
    assert np.allclose(b.singular_values, [2.0, 0.0])
    assert np.allclose(b.weights, [1.0, 0.0])
    assert np.isclose(b.lo[0], -math.sqrt(2)) and np.isclose(b.hi[0], math.sqrt(2))
    assert b.lo[1] == b.hi[1] == 0
    coef = project(b, np.array([1.0, 1.0]))
    assert np.allclose(reconstruct(b, coef, 1), [1, 1])
    assert np.allclose(reconstruct(b, coef, 0), b.mean)


def test_single_sample_stack():
    b = approximate(np.array([[0.3, 0.7, 0.1]]), 1, 0.1)
    assert np.array_equal(b.mean, [0.3, 0.7, 0.1])
    assert b.singular_values.tolist() == [0.0] and b.weights.tolist() == [0.0]
    assert b.lo.tolist() == [0.0] and b.hi.tolist() == [0.0]


def test_isotropic_weights():
    b = approximate(np.random.default_rng(0).normal(size=(10_000, 2)), 2, 0.1)
    assert np.allclose(b.weights, 0.5, atol=0.02)


def test_equicorrelation_top_pc_is_constant_direction():
    d, rho = 8, 0.6
    cov = np.full((d, d), rho) + (1 - rho) * np.eye(d)
    s = np.random.default_rng(1).multivariate_normal(np.zeros(d), cov, size=10_000)
    v = approximate(s, d, 0.1).components[:, 0]
    assert abs(v @ np.ones(d) / math.sqrt(d)) >= 0.99


stacks = st.integers(1, 6).flatmap(
    lambda d: st.integers(1, 12).flatmap(
        lambda n: hnp.arrays(np.float64, (n, d), elements=st.floats(-5, 5, allow_nan=False, width=32))
    )
)


@settings(max_examples=120, deadline=None)
@given(stacks, st.sampled_from([0.0, 0.1, 0.5]))
def test_basis_invariants(stack, alpha):
    n, d = stack.shape
    K = min(n, d)
    b = approximate(stack, K, alpha)
    live = b.singular_values > 0
    V = b.components
    assert np.abs(V.T @ V - np.eye(K)).max() <= 1e-8
    assert (np.diff(b.singular_values) <= 1e-12).all()
    assert (b.weights >= 0).all()
    total = b.weights.sum()
    assert total == 0 or abs(total - 1) <= 1e-12
    assert (b.lo <= 0).all() and (b.hi >= 0).all()
    assert (b.lo[~live] == 0).all() and (b.hi[~live] == 0).all()
    # sign convention
    cols = np.abs(V).argmax(axis=0)
    assert (V[cols, np.arange(K)] >= 0).all()
    centered = stack - b.mean
    assert math.isclose((b.singular_values**2).sum(), (centered**2).sum(), rel_tol=1e-6, abs_tol=1e-9)
    if alpha == 0.0:
        proj = centered @ V
        assert (proj[:, live] >= b.lo[live] - 1e-9).all() and (proj[:, live] <= b.hi[live] + 1e-9).all()
    if K == d:
        back = centered @ V @ V.T
        assert np.abs(back - centered).max() <= 1e-9


def test_batch_matches_single():
    s = np.random.default_rng(2).normal(size=(4, 9, 5))
    batch = approximate_batch(s, 3, 0.2)
    for i in range(4):
        one = approximate(s[i], 3, 0.2)
        assert np.allclose(batch[i].components, one.components)
        assert np.allclose(batch[i].lo, one.lo)


def test_k_bounds():
    with pytest.raises(ValueError):
        approximate(np.zeros((3, 4)), 4, 0.1)
    with pytest.raises(ValueError):
        approximate(np.zeros((3, 4)), 2, 1.0)


def test_pixelwise_baseline():
    b = pixelwise_baseline(np.array([[1.0, 1.0], [-1.0, -1.0]]), 0.0)
    assert b.lo.tolist() == [-1, -1] and b.hi.tolist() == [1, 1]
    assert np.array_equal(b.components, np.eye(2)) and b.kind == "standard-basis"
    assert np.allclose(b.weights, 0.5)
    c = pixelwise_baseline(np.full((4, 3), 0.25), 0.1)
    assert (c.lo == 0).all() and (c.hi == 0).all()


def test_pixelwise_matches_pca_in_one_dimension():
    s = np.random.default_rng(3).normal(size=(50, 1))
    a, b = approximate(s, 1, 0.1), pixelwise_baseline(s, 0.1)
    sign = a.components[0, 0]
    lo, hi = sorted([a.lo[0] * sign, a.hi[0] * sign])
    assert np.isclose(lo, b.lo[0]) and np.isclose(hi, b.hi[0])


def test_basis_file_roundtrip_and_corruption(tmp_path):
    b = approximate(np.random.default_rng(4).normal(size=(6, 4)), 3, 0.1)
    save_basis(b, tmp_path / "b.json", instance_id=3)
    back = load_basis(tmp_path / "b.json")
    for f in ("mean", "components", "singular_values", "weights", "lo", "hi"):
        assert np.array_equal(getattr(back, f), getattr(b, f))
    blob = tmp_path / "b.bin"
    data = bytearray(blob.read_bytes())
    data[5] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(DataError, match="checksum"):
        load_basis(tmp_path / "b.json")
    (tmp_path / "c.json").write_text(json.dumps({"blob": "missing.bin"}))
    with pytest.raises(DataError):
        load_basis(tmp_path / "c.json")


def test_stack_bases():
    rng = np.random.default_rng(5)
    bases = [approximate(rng.normal(size=(5, 3)), 2, 0.1) for _ in range(3)]
    batch = stack_bases(bases)
    assert batch.batched and len(batch) == 3
    assert np.array_equal(batch[1].lo, bases[1].lo)
