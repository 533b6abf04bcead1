"""End-to-end runs: data -> samples -> approximation -> calibration -> evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .approximation import PrincipalBasis, approximate_batch, pixelwise_baseline_batch
from .calibration import CalibrationResult, da_puq_calibrate, e_puq_calibrate, rda_puq_calibrate
from .config import RunConfig
from .core import DataError, tile_batch
from .metrics import RiskReport, evaluate, guarantee_verdict, instance_metrics, summarize, volume_map
from .samplers import (
    DatasetPair,
    FileSampler,
    GaussianSampler,
    GaussianTask,
    draw_stacks,
    generate_dataset,
    read_dataset,
    split_dataset,
)

log = logging.getLogger(__name__)


@dataclass
class Instances:
    """Calibration/test instances after tiling: one row per (image, tile)."""

    ys: np.ndarray  # (N, d_patch)
    stacks: np.ndarray  # (N, n_samples, d_patch)
    image_ids: np.ndarray
    tile_index: np.ndarray

    def __len__(self):
        return self.ys.shape[0]


def make_sampler(cfg: RunConfig):
    if cfg.task.kind == "gaussian":
        return GaussianSampler(GaussianTask(cfg.task.gaussian_spec()))
    root = Path(cfg.task.dataset).parent
    return FileSampler(int(np.prod(cfg.task.shape)), root)


def build_instances(cfg: RunConfig, pairs: Sequence[DatasetPair], sampler, n_samples: int,
                    replicate: int = 0) -> Instances:
    shape = tuple(cfg.task.shape)
    spec = cfg.patch.spec()
    T, dp = spec.n_tiles(shape), spec.patch_dim(shape)
    if not pairs:
        return Instances(np.empty((0, dp)), np.empty((0, n_samples, dp)),
                         np.empty(0, int), np.empty(0, int))
    ys = np.stack([p.y for p in pairs])
    stacks = draw_stacks(sampler, pairs, n_samples, cfg.seed, replicate)
    ys_t = tile_batch(ys, shape, spec).reshape(-1, dp)
    st = tile_batch(stacks, shape, spec)  # (N, n, T, dp)
    st = np.swapaxes(st, 1, 2).reshape(-1, n_samples, dp)
    ids = np.repeat([p.instance_id for p in pairs], T)
    tiles = np.tile(np.arange(T), len(pairs))
    return Instances(ys_t, st, ids, tiles)


def build_basis(cfg: RunConfig, stacks: np.ndarray, K: int | None = None) -> PrincipalBasis:
    if cfg.method == "pixelwise-baseline":
        return pixelwise_baseline_batch(stacks, cfg.risk.alpha)
    return approximate_batch(stacks, K or cfg.K, cfg.risk.alpha)


def calibrate(cfg: RunConfig, inst: Instances, basis: PrincipalBasis | None = None) -> CalibrationResult:
    """Run the configured procedure; ``basis`` may come from a cache."""
    risk, grid = cfg.risk.spec(), cfg.grid.spec()
    if cfg.method == "rda-puq":
        return rda_puq_calibrate(inst.stacks, inst.ys, cfg.K_max, grid, risk, cfg.epsilon)
    if basis is None:
        basis = build_basis(cfg, inst.stacks)
    return calibrate_bases(cfg, basis, inst.ys)


def calibrate_bases(cfg: RunConfig, basis: PrincipalBasis, ys) -> CalibrationResult:
    """E-PUQ, DA-PUQ or the pixelwise baseline from precomputed bases."""
    if cfg.method == "rda-puq":
        raise ValueError("rda-puq recomputes bases per λ3 and needs sample stacks")
    risk, grid = cfg.risk.spec(), cfg.grid.spec()
    if cfg.method == "da-puq":
        return da_puq_calibrate(basis, ys, grid, risk, cfg.epsilon)
    return e_puq_calibrate(basis, ys, grid, risk, cfg.epsilon, method=cfg.method)


def evaluation_basis(cfg: RunConfig, result: CalibrationResult, stacks: np.ndarray) -> PrincipalBasis:
    """Approximation for test instances with exactly the calibrated sample count."""
    if cfg.method == "rda-puq":
        k = result.K_hat
        return approximate_batch(stacks[:, :k], k, cfg.risk.alpha)
    return build_basis(cfg, stacks)


def load_pairs(cfg: RunConfig, replicate: int = 0) -> tuple[list[DatasetPair], list[DatasetPair]]:
    """Calibration and test pairs for one replicate."""
    if cfg.task.kind == "gaussian":
        task = GaussianTask(cfg.task.gaussian_spec())
        pairs = generate_dataset(task, cfg.n_cal + cfg.n_test, cfg.seed, replicate)
    else:
        header, pairs = read_dataset(cfg.task.dataset)
        if tuple(header["shape"]) != tuple(cfg.task.shape):
            raise DataError(f"dataset shape {header['shape']} != config shape {list(cfg.task.shape)}")
    return split_dataset(pairs, cfg.n_cal, cfg.n_test, cfg.seed, replicate)


@dataclass
class ReplicateOutcome:
    result: CalibrationResult
    report: RiskReport
    volume_map: np.ndarray | None = None


def run_split(cfg: RunConfig, cal: Sequence[DatasetPair], test: Sequence[DatasetPair],
              replicate: int = 0) -> ReplicateOutcome:
    sampler = make_sampler(cfg)
    cal_inst = build_instances(cfg, cal, sampler, cfg.n_samples, replicate)
    result = calibrate(cfg, cal_inst)
    test_inst = build_instances(cfg, test, sampler, cfg.n_samples, replicate)
    if result.abstained or len(test_inst) == 0:
        report = RiskReport(result.method, len(test_inst), result.abstained, result.K, result.K_hat)
        return ReplicateOutcome(result, report)
    basis = evaluation_basis(cfg, result, test_inst.stacks)
    report = evaluate(basis, test_inst.ys, result)
    vmap = None
    if cfg.patch.mode == "local-tiling":
        vols = instance_metrics(basis, test_inst.ys, result).volume
        vmap = volume_map(vols, test_inst.tile_index, cfg.patch.spec().grid_shape(tuple(cfg.task.shape)))
    return ReplicateOutcome(result, report, vmap)


def run_replicate(cfg: RunConfig, replicate: int) -> ReplicateOutcome:
    cal, test = load_pairs(cfg, replicate)
    return run_split(cfg, cal, test, replicate)


def replicate(cfg: RunConfig, n_replicates: int | None = None, threads: int | None = None) -> dict:
    """Independent calibration/test splits; reports are merged in replicate order."""
    cfg = cfg.resolve()
    R = cfg.n_replicates if n_replicates is None else n_replicates
    workers = threads or cfg.threads or 1
    if workers > 1 and R > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda r: run_replicate(cfg, r), range(R)))
    else:
        outcomes = [run_replicate(cfg, r) for r in range(R)]
    reports = [o.report for o in outcomes]
    risk = cfg.risk
    beta = risk.beta if cfg.method in ("da-puq", "rda-puq") else None
    return {
        "method": cfg.method,
        "seed": cfg.seed,
        "reports": reports,
        "outcomes": outcomes,
        "summary": summarize(reports),
        "guarantee": guarantee_verdict(reports, risk.alpha, risk.delta, beta),
    }
