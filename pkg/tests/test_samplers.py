import json

import numpy as np
import pytest

from puq.core import ConfigError, DataError, ShapeError, derive_stream
from puq.samplers import (
    DatasetPair,
    FileSampler,
    GaussianTask,
    GaussianTaskSpec,
    covariance_factor,
    covariance_matrix,
    gaussian_ground_truth,
    gaussian_sample,
    generate_dataset,
    load_stack,
    read_dataset,
    save_stack,
    split_dataset,
    write_dataset,
)


def rng(i=0):
    return np.random.default_rng(i)


def test_zero_variance_sampler_returns_mean():
    task = GaussianTask(GaussianTaskSpec(shape=(1, 2, 1), covariance="diagonal", variances=(0.0,)))
    x = task.draw_input(rng())
    m = task.mean(x)
    assert np.array_equal(gaussian_sample(task, x, 7, rng()), np.tile(m, (7, 1)))
    assert np.array_equal(gaussian_ground_truth(task, x, rng()), m)


def test_mean_map_stays_in_range():
    task = GaussianTask(GaussianTaskSpec(shape=(3, 3, 3), input_dim=5))
    xs = rng(1).uniform(size=(200, 5))
    means = np.stack([task.mean(x) for x in xs])
    assert means.min() >= 0.2 and means.max() <= 0.8


def test_sample_covariance_equicorrelation_identity():
    spec = GaussianTaskSpec(shape=(1, 2, 1), rho=0.0, tau2=1.0)
    task = GaussianTask(spec)
    s = gaussian_sample(task, np.full(4, 0.5), 100_000, rng(2))
    assert np.abs(np.cov(s.T) - np.eye(2)).max() < 0.05


def test_sampler_scale_multiplies_spread():
    spec = GaussianTaskSpec(shape=(1, 1, 1), covariance="diagonal", variances=(1.0,), sampler_scale=2.0)
    s = gaussian_sample(GaussianTask(spec), np.zeros(4), 100_000, rng(3))
    assert abs(s.var() / 4 - 1) < 0.05


def test_ground_truth_mean_and_scale_independence():
    base = dict(shape=(1, 1, 1), covariance="diagonal", variances=(0.01,))
    t1 = GaussianTask(GaussianTaskSpec(**base, sampler_scale=1.0))
    t3 = GaussianTask(GaussianTaskSpec(**base, sampler_scale=3.0))
    x = np.full(4, 0.5)
    assert np.array_equal(t1.ground_truth(x, rng(4)), t3.ground_truth(x, rng(4)))
    m = t1.mean(x)[0]
    draws = np.array([t1.ground_truth(x, g) for g in [derive_stream(5, i, "t") for i in range(20_000)]])
    # 5 sigma of the sample mean (0.1 / sqrt(2e4))
    assert abs(draws.mean() - m) < 5 * 0.1 / np.sqrt(20_000)


def test_sample_covariance_matches_scaled_model():
    spec = GaussianTaskSpec(shape=(2, 2, 1), covariance="spatial-exponential", length_scale=2.0,
                            tau2=0.04, sampler_scale=1.5)
    task = GaussianTask(spec)
    n = 100_000
    s = gaussian_sample(task, np.full(4, 0.3), n, rng(6))
    target = 1.5**2 * covariance_matrix(spec)
    sd = np.sqrt((target**2 + np.outer(np.diag(target), np.diag(target))) / n)
    assert (np.abs(np.cov(s.T) - target) < 5 * sd).all()


def test_covariance_factor_fallback_for_singular():
    cov = np.ones((3, 3))  # rank one
    L = covariance_factor(cov)
    assert np.allclose(L @ L.T, cov, atol=1e-12)
    with pytest.raises(ConfigError):
        covariance_factor(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_spec_validation():
    with pytest.raises(ConfigError):
        GaussianTaskSpec(rho=1.0)
    with pytest.raises(ConfigError):
        GaussianTaskSpec(covariance="diagonal")
    with pytest.raises(ConfigError):
        GaussianTaskSpec(sampler_scale=0)


def test_dataset_generation_and_split():
    task = GaussianTask(GaussianTaskSpec())
    assert generate_dataset(task, 0, seed=1) == []
    a = generate_dataset(task, 600, seed=1)
    b = generate_dataset(task, 600, seed=1)
    assert all(np.array_equal(p.y, q.y) and np.array_equal(p.x, q.x) for p, q in zip(a, b))
    cal, test = split_dataset(a, 300, 300, seed=1)
    ids_c, ids_t = {p.instance_id for p in cal}, {p.instance_id for p in test}
    assert len(ids_c) == 300 and len(ids_t) == 300 and not ids_c & ids_t
    assert {p.split for p in cal} == {"cal"}
    with pytest.raises(DataError):
        split_dataset(a, 400, 300, seed=1)


def test_stack_roundtrip(tmp_path):
    st = rng(7).normal(size=(3, 4))
    save_stack(st, tmp_path / "s.json")
    assert np.array_equal(load_stack(tmp_path / "s.json"), st)


def test_stack_manifest_fields(tmp_path):
    save_stack(np.zeros((2, 12)), tmp_path / "s.json", "f32", (2, 2, 2, 3), instance_id=9)
    raw = json.loads((tmp_path / "s.json").read_text())
    assert set(raw) == {"dtype", "endianness", "shape", "blob", "instance_id"}
    assert load_stack(tmp_path / "s.json").shape == (2, 12)


def test_stack_truncated_blob(tmp_path):
    save_stack(np.ones((3, 4)), tmp_path / "s.json")
    blob = tmp_path / "s.bin"
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(DataError, match="bytes"):
        load_stack(tmp_path / "s.json")


def test_stack_rejects_nonfinite_and_bad_shape(tmp_path):
    st = np.ones((2, 2))
    st[0, 0] = np.nan
    save_stack(st, tmp_path / "s.json")
    with pytest.raises(DataError):
        load_stack(tmp_path / "s.json")
    with pytest.raises(ShapeError):
        save_stack(np.ones(3), tmp_path / "t.json")


def test_file_sampler(tmp_path):
    save_stack(np.arange(12.0).reshape(4, 3), tmp_path / "a.json")
    fs = FileSampler(3, tmp_path)
    pair = DatasetPair(np.zeros(1), np.zeros(3), 0, samples="a.json")
    assert fs.sample(pair, 2).tolist() == [[0, 1, 2], [3, 4, 5]]
    with pytest.raises(DataError):
        fs.sample(pair, 5)
    with pytest.raises(DataError):
        fs.sample(DatasetPair(np.zeros(1), np.zeros(3), 1), 1)


def test_dataset_file_roundtrip(tmp_path):
    task = GaussianTask(GaussianTaskSpec())
    pairs = generate_dataset(task, 5, seed=2)
    write_dataset(tmp_path / "d.jsonl", pairs, (2, 2, 3), 4)
    header, back = read_dataset(tmp_path / "d.jsonl")
    assert header["n"] == 5 and header["shape"] == [2, 2, 3]
    assert all(np.array_equal(p.y, q.y) and p.instance_id == q.instance_id for p, q in zip(pairs, back))


def test_dataset_file_errors(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("")
    with pytest.raises(DataError):
        read_dataset(path)
    write_dataset(path, [], (1, 1, 1), 2)
    assert read_dataset(path)[1] == []
    path.write_text(path.read_text().replace('"n": 0', '"n": 2'))
    with pytest.raises(DataError):
        read_dataset(path)
