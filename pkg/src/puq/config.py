"""Run configuration: a single JSON document, validated on load.

See ``docs/config.md`` for the full schema. Every field has a default; ``resolve``
fills in the fields whose defaults depend on others (``K``, ``K_max``,
``n_samples`` and the λ grids), and the resolved config is what gets echoed to
disk so a run can be reproduced from it.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .calibration import LambdaGrid, RiskConfig, default_grid1, default_grid2, default_grid3, reduced_k
from .core import ConfigError, PatchSpec
from .samplers import GaussianTaskSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskConfig(_Strict):
    kind: Literal["gaussian", "files"] = "gaussian"
    shape: tuple[int, int, int] = (2, 2, 3)
    covariance: Literal["equicorrelation", "spatial-exponential", "diagonal"] = "equicorrelation"
    rho: float = 0.9
    tau2: float = 0.01
    length_scale: float = 4.0
    channel_corr: float = 0.5
    variances: Optional[list[float]] = None
    sampler_scale: float = 1.0
    input_dim: int = 4
    mean_seed: int = 0
    dataset: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "files" and not self.dataset:
            raise ValueError("task.kind='files' needs task.dataset")
        if self.kind == "gaussian":
            self.gaussian_spec()
        return self

    def gaussian_spec(self) -> GaussianTaskSpec:
        return GaussianTaskSpec(
            shape=tuple(self.shape), covariance=self.covariance, rho=self.rho, tau2=self.tau2,
            length_scale=self.length_scale, channel_corr=self.channel_corr,
            variances=None if self.variances is None else tuple(self.variances),
            sampler_scale=self.sampler_scale, input_dim=self.input_dim, mean_seed=self.mean_seed,
        )


class PatchConfig(_Strict):
    mode: Literal["global", "local-tiling"] = "global"
    patch_h: int = Field(1, ge=1)
    patch_w: int = Field(1, ge=1)

    def spec(self) -> PatchSpec:
        return PatchSpec(self.patch_h, self.patch_w, self.mode)


class RiskModel(_Strict):
    alpha: float = 0.1
    beta: float = 0.05
    q: float = 0.9
    delta: float = 0.1

    def spec(self) -> RiskConfig:
        return RiskConfig(self.alpha, self.beta, self.q, self.delta)


class GridConfig(_Strict):
    grid1: Optional[list[float]] = None
    grid2: Optional[list[float]] = None
    grid3: Optional[list[float]] = None

    def spec(self) -> LambdaGrid:
        return LambdaGrid(
            tuple(self.grid1 or default_grid1()),
            tuple(self.grid2 or default_grid2()),
            tuple(self.grid3 or default_grid3()),
        )


class RunConfig(_Strict):
    task: TaskConfig = TaskConfig()
    patch: PatchConfig = PatchConfig()
    method: Literal["e-puq", "da-puq", "rda-puq", "pixelwise-baseline"] = "e-puq"
    risk: RiskModel = RiskModel()
    grid: GridConfig = GridConfig()
    K: Optional[int] = Field(None, ge=1)
    K_max: Optional[int] = Field(None, ge=1)
    n_samples: Optional[int] = Field(None, ge=1)
    n_cal: int = Field(300, ge=1)
    n_test: int = Field(300, ge=0)
    n_replicates: int = Field(100, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "puq-out"
    epsilon: float = Field(1e-10, gt=0)
    threads: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        self.risk.spec()
        self.grid.spec()
        if self.task.kind == "gaussian":
            self.patch.spec().tile_size(tuple(self.task.shape))
        return self

    @property
    def patch_dim(self) -> int:
        return self.patch.spec().patch_dim(tuple(self.task.shape))

    def resolve(self) -> "RunConfig":
        """Fill dependent defaults and check sample/axis counts before any work."""
        d = self.patch_dim
        upd: dict = {}
        if self.method in ("e-puq", "pixelwise-baseline"):
            K = d if self.K is None else self.K
            if K != d:
                raise ConfigError(f"{self.method} uses K = d = {d}, got K={K}")
            upd["K"] = K
            n_samples = self.n_samples or K
        elif self.method == "da-puq":
            K = self.K or min(100, d)
            upd["K"] = K
            n_samples = self.n_samples or K
        else:
            K = self.K_max or self.K or min(100, d)
            upd["K_max"] = K
            upd["K"] = K
            n_samples = self.n_samples or K
        if K > d:
            raise ConfigError(f"K={K} exceeds the patch dimension d={d}")
        if K > n_samples:
            raise ConfigError(f"K={K} exceeds n_samples={n_samples}")
        upd["n_samples"] = n_samples
        grid = self.grid.spec()
        if self.method == "rda-puq":
            bad = [g for g in grid.grid3 if reduced_k(K, g) < 1]
            if bad:
                raise ConfigError(f"grid3 values {bad} give fewer than one sample for K_max={K}")
        upd["grid"] = GridConfig(grid1=list(grid.grid1), grid2=list(grid.grid2), grid3=list(grid.grid3))
        return self.model_copy(update=upd)

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except (ValidationError, ConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

