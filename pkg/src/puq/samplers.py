"""Posterior samplers and synthetic datasets.

A sample stack is a plain ``(n, d)`` float64 array, one posterior draw per row.
Two samplers are provided: an analytic Gaussian task, where the true posterior
is known exactly, and a file-backed sampler that reads stacks produced
elsewhere (e.g. by a diffusion model).
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np

from .core import ConfigError, DataError, ShapeError, derive_stream

log = logging.getLogger(__name__)

CovarianceKind = Literal["equicorrelation", "spatial-exponential", "diagonal"]


@dataclass(frozen=True)
class DatasetPair:
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    instance_id: int = 0
    split: str | None = None
    samples: str | None = None  # stack manifest path, file-backed datasets only


class PosteriorSampler(Protocol):
    dim: int

    def sample(self, pair: DatasetPair, n: int, rng: np.random.Generator) -> np.ndarray:
        ...


@dataclass(frozen=True)
class GaussianTaskSpec:
    """Synthetic inverse problem with posterior ``N(m(x), C)``.

    The sampler draws from ``N(m(x), s^2 C)``; ground truth always uses ``C``.
    """

    shape: tuple[int, int, int] = (2, 2, 3)
    covariance: CovarianceKind = "equicorrelation"
    rho: float = 0.9
    tau2: float = 0.01
    length_scale: float = 4.0
    channel_corr: float = 0.5
    variances: tuple[float, ...] | None = None
    sampler_scale: float = 1.0
    input_dim: int = 4
    mean_seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"bad image shape {self.shape}")
        if self.sampler_scale <= 0:
            raise ConfigError("sampler_scale must be positive")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.covariance == "equicorrelation" and not 0 <= self.rho < 1:
            raise ConfigError("rho must lie in [0, 1)")
        if self.covariance == "spatial-exponential" and self.length_scale <= 0:
            raise ConfigError("length_scale must be positive")
        if self.covariance != "diagonal" and self.tau2 <= 0:
            raise ConfigError("tau2 must be positive")
        if self.covariance == "diagonal":
            if self.variances is None or len(self.variances) not in (1, self.dim):
                raise ConfigError("diagonal covariance needs 1 or d variances")
            if min(self.variances) < 0:
                raise ConfigError("variances must be nonnegative")

    @property
    def dim(self) -> int:
        h, w, c = self.shape
        return h * w * c


def covariance_matrix(spec: GaussianTaskSpec) -> np.ndarray:
    d = spec.dim
    if spec.covariance == "equicorrelation":
        cov = np.full((d, d), spec.rho)
        np.fill_diagonal(cov, 1.0)
        return spec.tau2 * cov
    if spec.covariance == "spatial-exponential":
        h, w, c = spec.shape
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
        dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        spatial = np.exp(-dist / spec.length_scale)
        chan = np.full((c, c), spec.channel_corr)
        np.fill_diagonal(chan, 1.0)
        return spec.tau2 * np.kron(spatial, chan)
    if spec.covariance == "diagonal":
        var = np.broadcast_to(np.asarray(spec.variances, dtype=float), (d,))
        return np.diag(var)
    raise ConfigError(f"unknown covariance model {spec.covariance!r}")


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Return L with ``L @ L.T == cov``; eigen fallback for singular PSD input."""
    cov = np.asarray(cov, dtype=np.float64)
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max(initial=0))):
        raise ConfigError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    evals, evecs = np.linalg.eigh(cov)
    top = max(evals.max(initial=0.0), 0.0)
    tol = 1e-12 * top
    if evals.min(initial=0.0) < -max(tol, 1e-10 * max(top, 1.0)):
        raise ConfigError(f"covariance is not PSD (min eigenvalue {evals.min():.3g})")
    evals = np.where(evals > tol, evals, 0.0)
    return evecs * np.sqrt(evals)


class GaussianTask:
    """Materialized Gaussian task: covariance, its factor and the mean map."""

    def __init__(self, spec: GaussianTaskSpec):
        self.spec = spec
        self.dim = spec.dim
        self.cov = covariance_matrix(spec)
        self.factor = covariance_factor(self.cov)
        rng = derive_stream(spec.mean_seed, 0, "mean-map")
        # Rows are convex weights, so m(x) = 0.2 + 0.6 * A x stays in [0.2, 0.8].
        a = rng.random((self.dim, spec.input_dim))
        self.weights = 0.6 * a / a.sum(axis=1, keepdims=True)
        self.offset = np.full(self.dim, 0.2)

    def mean(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.spec.input_dim,):
            raise ShapeError(f"input has shape {x.shape}, expected ({self.spec.input_dim},)")
        return self.weights @ x + self.offset

    def draw_input(self, rng: np.random.Generator) -> np.ndarray:
        return rng.random(self.spec.input_dim)

    def ground_truth(self, x, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        return self.mean(x) + self.factor @ z

    def sample(self, x, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("sample count must be >= 1")
        z = rng.standard_normal((n, self.dim))
        return self.mean(x) + self.spec.sampler_scale * (z @ self.factor.T)


def gaussian_sample(task: GaussianTask, x, n: int, rng: np.random.Generator) -> np.ndarray:
    return task.sample(x, n, rng)


def gaussian_ground_truth(task: GaussianTask, x, rng: np.random.Generator) -> np.ndarray:
    return task.ground_truth(x, rng)


class GaussianSampler:
    def __init__(self, task: GaussianTask):
        self.task = task
        self.dim = task.dim

    def sample(self, pair: DatasetPair, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.task.sample(pair.x, n, rng)


def generate_dataset(task: GaussianTask, n_instances: int, seed: int, replicate: int = 0,
                     start_id: int = 0) -> list[DatasetPair]:
    pairs = []
    for i in range(start_id, start_id + n_instances):
        x = task.draw_input(derive_stream(seed, i, f"r{replicate}/input"))
        y = task.ground_truth(x, derive_stream(seed, i, f"r{replicate}/truth"))
        pairs.append(DatasetPair(x=x, y=y, instance_id=i))
    return pairs


def split_dataset(pairs: Sequence[DatasetPair], n_cal: int, n_test: int, seed: int,
                  replicate: int = 0) -> tuple[list[DatasetPair], list[DatasetPair]]:
    """Random disjoint calibration/test split of ``pairs``."""
    if n_cal + n_test > len(pairs):
        raise DataError(f"need {n_cal + n_test} instances, dataset has {len(pairs)}")
    perm = derive_stream(seed, 0, f"r{replicate}/split").permutation(len(pairs))
    cal = [_with_split(pairs[j], "cal") for j in perm[:n_cal]]
    test = [_with_split(pairs[j], "test") for j in perm[n_cal:n_cal + n_test]]
    return cal, test


def _with_split(pair: DatasetPair, split: str) -> DatasetPair:
    return DatasetPair(pair.x, pair.y, pair.instance_id, split, pair.samples)


def draw_stacks(sampler: PosteriorSampler, pairs: Sequence[DatasetPair], n: int, seed: int,
                replicate: int = 0) -> np.ndarray:
    """Sample stacks for every pair, shape ``(len(pairs), n, d)``."""
    out = np.empty((len(pairs), n, sampler.dim))
    for j, pair in enumerate(pairs):
        out[j] = sampler.sample(pair, n, derive_stream(seed, pair.instance_id, f"r{replicate}/sample"))
    return out


# ---------------------------------------------------------------------------
# Stack files: JSON manifest + raw little-endian blob

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True)
class StackManifest:
    dtype: Literal["f32", "f64"]
    shape: tuple[int, ...]
    blob: str
    endianness: str = "little"
    instance_id: int | None = None

    def to_json(self) -> dict:
        out = {"dtype": self.dtype, "endianness": self.endianness,
               "shape": list(self.shape), "blob": self.blob}
        if self.instance_id is not None:
            out["instance_id"] = self.instance_id
        return out

    @classmethod
    def read(cls, path) -> "StackManifest":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read stack manifest {path}: {exc}") from exc
        allowed = {"dtype", "endianness", "shape", "blob", "instance_id"}
        if not isinstance(raw, dict) or set(raw) - allowed or not {"dtype", "shape", "blob"} <= set(raw):
            raise DataError(f"malformed stack manifest {path}")
        if raw["dtype"] not in _DTYPES or raw.get("endianness", "little") != "little":
            raise DataError(f"unsupported dtype/endianness in {path}")
        shape = tuple(int(s) for s in raw["shape"])
        if len(shape) not in (2, 4) or min(shape) < 1:
            raise DataError(f"stack shape must be (n, d) or (n, h, w, c), got {shape}")
        return cls(raw["dtype"], shape, raw["blob"], "little", raw.get("instance_id"))


def save_stack(stack, path, dtype: Literal["f32", "f64"] = "f64", shape=None,
               instance_id: int | None = None) -> StackManifest:
    """Write ``stack`` next to a manifest at ``path``; blob goes to ``<stem>.bin``."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2:
        raise ShapeError("stack must be a 2-d (n, d) array")
    shape = tuple(shape) if shape is not None else stack.shape
    if int(np.prod(shape)) != stack.size or shape[0] != stack.shape[0]:
        raise ShapeError(f"shape {shape} does not match stack {stack.shape}")
    path = Path(path)
    blob = path.with_suffix(".bin")
    blob.write_bytes(np.ascontiguousarray(stack, dtype=_DTYPES[dtype]).tobytes())
    manifest = StackManifest(dtype, shape, blob.name, instance_id=instance_id)
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest


def load_stack(path) -> np.ndarray:
    path = Path(path)
    manifest = StackManifest.read(path)
    blob = path.parent / manifest.blob
    try:
        data = blob.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read stack blob {blob}: {exc}") from exc
    dt = _DTYPES[manifest.dtype]
    expected = int(np.prod(manifest.shape)) * dt.itemsize
    if len(data) != expected:
        raise DataError(f"{blob}: {len(data)} bytes, manifest implies {expected}")
    arr = np.frombuffer(data, dtype=dt).astype(np.float64)
    if not np.isfinite(arr).all():
        raise DataError(f"{blob}: non-finite values")
    n = manifest.shape[0]
    return arr.reshape(n, -1)


class FileSampler:
    """Serves precomputed stacks; the random stream is ignored."""

    def __init__(self, dim: int, root: Path | str = "."):
        self.dim = dim
        self.root = Path(root)

    def sample(self, pair: DatasetPair, n: int, rng=None) -> np.ndarray:
        if pair.samples is None:
            raise DataError(f"instance {pair.instance_id} has no sample stack")
        stack = load_stack(self.root / pair.samples)
        if stack.shape[1] != self.dim:
            raise DataError(f"instance {pair.instance_id}: stack dim {stack.shape[1]} != {self.dim}")
        if stack.shape[0] < n:
            raise DataError(f"instance {pair.instance_id}: {stack.shape[0]} samples, {n} requested")
        return stack[:n]


# ---------------------------------------------------------------------------
# Dataset files: JSON-lines, header first, vectors as base64 little-endian f64

DATASET_FORMAT = "puq-dataset"


def _enc(v: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode("ascii")


def _dec(s: str, n: int, what: str) -> np.ndarray:
    try:
        v = np.frombuffer(base64.b64decode(s, validate=True), dtype="<f8").astype(np.float64)
    except (ValueError, TypeError) as exc:
        raise DataError(f"bad base64 for {what}") from exc
    if v.size != n:
        raise DataError(f"{what}: {v.size} values, expected {n}")
    return v


def write_dataset(path, pairs: Sequence[DatasetPair], shape, input_dim: int, extra: dict | None = None):
    header = {"format": DATASET_FORMAT, "version": 1, "shape": list(shape),
              "input_dim": input_dim, "n": len(pairs)}
    if extra:
        header.update(extra)
    lines = [json.dumps(header, sort_keys=True)]
    for p in pairs:
        rec = {"id": p.instance_id, "x": _enc(p.x), "y": _enc(p.y)}
        if p.split is not None:
            rec["split"] = p.split
        if p.samples is not None:
            rec["samples"] = p.samples
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> tuple[dict, list[DatasetPair]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty dataset file (missing header)")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON line: {exc}") from exc
    if header.get("format") != DATASET_FORMAT:
        raise DataError(f"{path}: not a {DATASET_FORMAT} file")
    shape = tuple(header["shape"])
    d = int(np.prod(shape))
    in_dim = int(header["input_dim"])
    if header.get("n") != len(records):
        raise DataError(f"{path}: header says {header.get('n')} records, found {len(records)}")
    pairs = [
        DatasetPair(
            x=_dec(r["x"], in_dim, f"record {r.get('id')} x"),
            y=_dec(r["y"], d, f"record {r.get('id')} y"),
            instance_id=int(r["id"]),
            split=r.get("split"),
            samples=r.get("samples"),
        )
        for r in records
    ]
    return header, pairs
