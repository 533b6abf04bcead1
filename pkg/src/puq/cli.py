"""Command-line front end.

Stages share files on disk: ``synth-gen`` writes a dataset, ``approximate`` caches
one basis per instance, ``calibrate`` writes a calibration result, ``evaluate``
turns it into a risk report, and ``report`` lines up several reports. ``replicate``
runs the whole protocol in memory over many independent splits.

Exit codes: 0 success, 2 abstention, 3 config error, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .approximation import PrincipalBasis, load_basis, save_basis, stack_bases
from .calibration import CalibrationResult, _jsonable
from .config import RunConfig, load_config
from .core import ConfigError, DataError, ShapeError, derive_stream, tile_batch
from .metrics import RiskReport, evaluate, instance_metrics, volume_map, write_volume_map_csv
from .pipeline import (
    Instances,
    build_basis,
    build_instances,
    calibrate,
    calibrate_bases,
    evaluation_basis,
    replicate,
)
from .samplers import (
    DatasetPair,
    FileSampler,
    GaussianSampler,
    GaussianTask,
    draw_stacks,
    generate_dataset,
    read_dataset,
    save_stack,
    split_dataset,
    write_dataset,
)

log = logging.getLogger("puq")

EXIT_OK, EXIT_ABSTAIN, EXIT_CONFIG, EXIT_DATA = 0, 2, 3, 4

# Keys excluded when comparing report files for determinism.
VOLATILE_KEYS = ("created_at",)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with abstention
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {
        "seed": getattr(args, "seed", None),
        "method": getattr(args, "method", None),
        "K": getattr(args, "K", None),
        "K_max": getattr(args, "K_max", None),
        "n_samples": getattr(args, "n_samples", None),
        "n_cal": getattr(args, "n_cal", None),
        "n_test": getattr(args, "n_test", None),
        "n_replicates": getattr(args, "n_replicates", None),
    }
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _json_value(value)
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args)).resolve()


def _workers(cfg: RunConfig, args) -> int:
    # --threads is applied here rather than written into the config, so reports
    # stay identical whatever the worker count
    return getattr(args, "threads", None) or cfg.threads or os.cpu_count() or 1


def _dump_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# dataset helpers


def _load_dataset(cfg: RunConfig, path):
    header, pairs = read_dataset(path)
    if tuple(header["shape"]) != tuple(cfg.task.shape):
        raise DataError(f"dataset shape {header['shape']} != config task.shape {list(cfg.task.shape)}")
    return header, pairs


def _sampler_for(cfg: RunConfig, pairs, dataset_path):
    if any(p.samples is not None for p in pairs):
        return FileSampler(int(np.prod(cfg.task.shape)), Path(dataset_path).parent)
    if cfg.task.kind == "gaussian":
        return GaussianSampler(GaussianTask(cfg.task.gaussian_spec()))
    raise DataError("dataset records carry no sample stacks and the task is not synthetic")


def _split(cfg: RunConfig, pairs, which: str) -> list[DatasetPair]:
    if any(p.split is not None for p in pairs):
        return [p for p in pairs if p.split == which]
    cal, test = split_dataset(pairs, cfg.n_cal, cfg.n_test, cfg.seed)
    return cal if which == "cal" else test


def _basis_path(cache: Path, instance_id: int, tile: int) -> Path:
    return cache / f"basis-{instance_id:06d}-t{tile:04d}.json"


def _cache_tag(cfg: RunConfig) -> dict:
    return {"method": cfg.method, "n_samples": cfg.n_samples, "seed": cfg.seed,
            "patch": cfg.patch.model_dump(mode="json")}


def _cached(path: Path, cfg: RunConfig, K: int) -> PrincipalBasis | None:
    """Basis from ``path`` if it exists and matches the config; warns on corrupt files."""
    if not path.exists():
        return None
    try:
        meta = json.loads(path.read_text())
        basis = load_basis(path)
    except (DataError, json.JSONDecodeError, OSError) as exc:
        log.warning("corrupt cache %s (%s); re-deriving", path.name, exc)
        return None
    tag = _cache_tag(cfg)
    if any(meta.get(k) != v for k, v in tag.items()) or basis.K != K or basis.alpha_used != cfg.risk.alpha:
        log.warning("stale cache %s; re-deriving", path.name)
        return None
    return basis


def _bases(cfg: RunConfig, pairs, sampler, cache: Path | None, force: bool = False,
           workers: int = 1, write: bool = False) -> tuple[PrincipalBasis, np.ndarray, dict]:
    """Batched bases for every (pair, tile) plus tiled targets, using the cache when possible."""
    shape = tuple(cfg.task.shape)
    spec = cfg.patch.spec()
    T = spec.n_tiles(shape)
    K = cfg.K
    found: dict[tuple[int, int], PrincipalBasis] = {}
    if cache is not None and not force:
        for p in pairs:
            for t in range(T):
                b = _cached(_basis_path(cache, p.instance_id, t), cfg, K)
                if b is not None:
                    found[(p.instance_id, t)] = b
    todo = [p for p in pairs if any((p.instance_id, t) not in found for t in range(T))]

    def work(chunk):
        inst = build_instances(cfg, chunk, sampler, cfg.n_samples)
        return chunk, build_basis(cfg, inst.stacks)

    chunks = [todo[i::workers] for i in range(workers)] if todo else []
    chunks = [c for c in chunks if c]
    if len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    for chunk, batch in results:
        for j, p in enumerate(chunk):
            for t in range(T):
                b = batch[j * T + t]
                found[(p.instance_id, t)] = b
                if write and cache is not None:
                    save_basis(b, _basis_path(cache, p.instance_id, t), instance_id=p.instance_id,
                               extra={**_cache_tag(cfg), "tile": t})
    order = [found[(p.instance_id, t)] for p in pairs for t in range(T)]
    ys = tile_batch(np.stack([p.y for p in pairs]), shape, spec).reshape(len(order), -1) if pairs else None
    stats = {"instances": len(order), "computed": sum(len(c) for c, _ in results) * T,
             "reused": len(order) - sum(len(c) for c, _ in results) * T}
    return (stack_bases(order) if order else None), ys, stats


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> int:
    cfg = _config(args)
    if cfg.task.kind != "gaussian":
        raise ConfigError("synth-gen needs task.kind = 'gaussian'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.n_cal + cfg.n_test if args.n is None else args.n
    task = GaussianTask(cfg.task.gaussian_spec())
    pairs = generate_dataset(task, n, cfg.seed)
    # Records go out in the order of the replicate harness's split 0, so that
    # stage-by-stage runs reproduce ``replicate`` with one replicate exactly.
    perm = derive_stream(cfg.seed, 0, "r0/split").permutation(n)
    pairs = [DatasetPair(pairs[j].x, pairs[j].y, pairs[j].instance_id,
                         "cal" if rank < cfg.n_cal else "test") for rank, j in enumerate(perm)]
    if args.samples:
        sdir = out / "samples"
        sdir.mkdir(exist_ok=True)
        stacks = draw_stacks(GaussianSampler(task), pairs, cfg.n_samples, cfg.seed)
        with_samples = []
        for p, st in zip(pairs, stacks):
            rel = f"samples/stack-{p.instance_id:06d}.json"
            save_stack(st, out / rel, "f64", (st.shape[0], *cfg.task.shape), instance_id=p.instance_id)
            with_samples.append(DatasetPair(p.x, p.y, p.instance_id, p.split, rel))
        pairs = with_samples
    write_dataset(out / "dataset.jsonl", pairs, cfg.task.shape, cfg.task.input_dim, {"seed": cfg.seed})
    (out / "config.json").write_text(cfg.dump())
    print(f"wrote {n} pairs to {out / 'dataset.jsonl'} (d={int(np.prod(cfg.task.shape))})")
    return EXIT_OK


def cmd_approximate(args) -> int:
    cfg = _config(args)  # K > n_samples fails here, before anything is read or drawn
    _, pairs = _load_dataset(cfg, args.dataset)
    sampler = _sampler_for(cfg, pairs, args.dataset)
    cache = Path(args.out)
    cache.mkdir(parents=True, exist_ok=True)
    _, _, stats = _bases(cfg, pairs, sampler, cache, force=args.force,
                         workers=_workers(cfg, args), write=True)
    print(f"{stats['instances']} bases: {stats['computed']} computed, {stats['reused']} reused ({cache})")
    return EXIT_OK


def _instances(cfg: RunConfig, pairs, sampler) -> Instances:
    return build_instances(cfg, pairs, sampler, cfg.n_samples)


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    _, pairs = _load_dataset(cfg, args.dataset)
    sampler = _sampler_for(cfg, pairs, args.dataset)
    cal = _split(cfg, pairs, "cal")
    if not cal:
        raise DataError("dataset has no calibration instances")
    if cfg.method == "rda-puq":
        result = calibrate(cfg, _instances(cfg, cal, sampler))
    else:
        cache = Path(args.bases) if args.bases else None
        basis, ys, _ = _bases(cfg, cal, sampler, cache, workers=_workers(cfg, args))
        result = calibrate_bases(cfg, basis, ys)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.write(out)
    if result.abstained:
        print(f"{cfg.method}: abstained, no grid point certified ({out})")
        return EXIT_ABSTAIN
    print(f"{cfg.method}: {result.valid.size} valid grid points, chosen {result.chosen()} ({out})")
    return EXIT_OK


SUMMARY_COLUMNS = ("method", "recon_risk", "khat_over_K", "uncertainty_volume", "coverage_risk",
                   "interval_size_active", "interval_size_padded", "K_hat", "replicates", "abstentions")


def _fmt(stat) -> str:
    if not stat or stat.get("mean") is None:
        return "-"
    return f"{stat['mean']:.4g} ± {stat['std']:.2g}"


def summary_row(method: str, stats: dict, K: int, replicates: int = 1, abstentions: int = 0) -> dict:
    """One summary-table row from mean/std dicts of a report or a replicate summary."""
    kh = stats.get("khat") or {}
    khat = "-" if kh.get("mean") is None else f"{kh['mean']:.3g} ± {kh['std']:.2g} / {K}"
    return {
        "method": method,
        "recon_risk": _fmt(stats.get("reconstruction_risk")),
        "khat_over_K": khat,
        "uncertainty_volume": _fmt(stats.get("uncertainty_volume")),
        "coverage_risk": _fmt(stats.get("coverage_risk")),
        "interval_size_active": _fmt(stats.get("interval_size_active")),
        "interval_size_padded": _fmt(stats.get("interval_size_padded")),
        "K_hat": _fmt(stats["K_hat"]) if isinstance(stats.get("K_hat"), dict) else str(stats.get("K_hat") or "-"),
        "replicates": replicates,
        "abstentions": abstentions,
    }


def _write_rows(rows: list[dict], path: Path, columns=SUMMARY_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _print_rows(rows: list[dict], columns=SUMMARY_COLUMNS):
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in columns))


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    result = CalibrationResult.read(args.calibration)
    if result.method != cfg.method:
        raise ConfigError(f"calibration was run with {result.method}, config says {cfg.method}")
    _, pairs = _load_dataset(cfg, args.dataset)
    sampler = _sampler_for(cfg, pairs, args.dataset)
    test = _split(cfg, pairs, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if result.abstained:
        report = RiskReport(result.method, len(test), True, result.K)
        _dump_json({"created_at": _timestamp(), "config": cfg.model_dump(mode="json"),
                    "report": report.to_json()}, out / "report.json")
        print(f"{cfg.method}: calibration abstained, nothing to evaluate")
        return EXIT_ABSTAIN
    if not test:
        raise DataError("dataset has no test instances")
    if cfg.method == "rda-puq":
        inst = _instances(cfg, test, sampler)
        basis, ys = evaluation_basis(cfg, result, inst.stacks), inst.ys
        tiles = inst.tile_index
    else:
        cache = Path(args.bases) if args.bases else None
        basis, ys, _ = _bases(cfg, test, sampler, cache, workers=_workers(cfg, args))
        tiles = np.tile(np.arange(cfg.patch.spec().n_tiles(tuple(cfg.task.shape))), len(test))
    report = evaluate(basis, ys, result)
    _dump_json({"created_at": _timestamp(), "config": cfg.model_dump(mode="json"),
                "report": report.to_json()}, out / "report.json")
    if cfg.patch.mode == "local-tiling":
        vols = instance_metrics(basis, ys, result).volume
        grid = volume_map(vols, tiles, cfg.patch.spec().grid_shape(tuple(cfg.task.shape)))
        write_volume_map_csv(grid, out / "volume_map.csv")
    row = summary_row(cfg.method, report.to_json(), result.K)
    _write_rows([row], out / "summary.csv")
    _print_rows([row])
    return EXIT_OK


def replicate_payload(cfg: RunConfig, res: dict) -> dict:
    """JSON document for a replicate run (without the timestamp)."""
    return {
        "method": res["method"],
        "seed": res["seed"],
        "config": cfg.model_dump(mode="json"),
        "guarantee": res["guarantee"],
        "summary": res["summary"],
        "reports": [r.to_json() for r in res["reports"]],
        "calibrations": [o.result.chosen() for o in res["outcomes"]],
    }


def cmd_replicate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    res = replicate(cfg, cfg.n_replicates, _workers(cfg, args))
    payload = {"created_at": _timestamp(), **replicate_payload(cfg, res)}
    _dump_json(payload, out / "replicates.json")
    (out / "config.json").write_text(cfg.dump())
    s = res["summary"]
    row = summary_row(cfg.method, s, cfg.K, s["replicates"], s["abstentions"])
    _write_rows([row], out / "summary.csv")
    _print_rows([row])
    g = res["guarantee"]
    frac = "-" if g["violation_fraction"] is None else f"{g['violation_fraction']:.3f}"
    bound = "-" if g["bound"] is None else f"{g['bound']:.3f}"
    print(f"guarantee: {g['verdict']} (violations {frac}, bound {bound}, abstentions {g['abstentions']})")
    if g["replicates"] and g["abstentions"] == g["replicates"]:
        return EXIT_ABSTAIN
    return EXIT_OK


def _report_stats(path) -> tuple[str, dict, int, int, int]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    if "summary" in raw:  # replicate output
        s = raw["summary"]
        return raw["method"], s, raw["config"]["K"], s["replicates"], s["abstentions"]
    if "report" in raw:
        r = raw["report"]
        return r["method"], r, r["K"], 1, int(r["abstained"])
    raise DataError(f"{path}: not a report file")


def cmd_report(args) -> int:
    entries = [_report_stats(p) for p in args.inputs]
    rows = [summary_row(m, s, K, R, a) for m, s, K, R, a in entries]
    # volume / interval ratios against the pixelwise baseline, else the first input
    methods = [e[0] for e in entries]
    ref = methods.index("pixelwise-baseline") if "pixelwise-baseline" in methods else 0
    ref_stats = entries[ref][1]
    ratio_rows = []
    for i, (m, s, *_rest) in enumerate(entries):
        if i == ref:
            continue
        ratios = {}
        for key in ("uncertainty_volume", "interval_size_padded"):
            a, b = (s.get(key) or {}).get("mean"), (ref_stats.get(key) or {}).get("mean")
            ratios[key] = None if a is None or not b else a / b
        ratio_rows.append({"ratio": f"{m}/{methods[ref]}", **ratios})
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(rows, out / "table.csv")
        _write_rows([{k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()}
                     for r in ratio_rows], out / "ratios.csv",
                    ("ratio", "uncertainty_volume", "interval_size_padded"))
    _print_rows(rows)
    for r in ratio_rows:
        vals = ", ".join(f"{k} {'-' if v is None else f'{v:.4g}'}" for k, v in r.items() if k != "ratio")
        print(f"ratio {r['ratio']}: {vals}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _common(p, seed_required=False):
    p.add_argument("--config", help="run config JSON (all fields optional)")
    p.add_argument("--seed", type=int, required=seed_required, help="master seed")
    p.add_argument("--method", choices=["e-puq", "da-puq", "rda-puq", "pixelwise-baseline"])
    p.add_argument("--K", type=int)
    p.add_argument("--K-max", dest="K_max", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--n-cal", dest="n_cal", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--threads", type=int, help="worker cap (default: available cores)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field by dotted key, e.g. task.rho=0.99")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="puq", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of pairs (default n_cal + n_test)")
    p.add_argument("--samples", action="store_true", help="also write posterior sample stacks")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("approximate", help="cache one principal basis per instance")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="cache directory")
    p.add_argument("--force", action="store_true", help="recompute existing caches")
    p.set_defaults(func=cmd_approximate)

    p = sub.add_parser("calibrate", help="calibrate on the dataset's calibration split")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--bases", help="basis cache directory")
    p.add_argument("--out", required=True, help="calibration result JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="evaluate a calibration on the test split")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--bases", help="basis cache directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replicate", help="repeat calibration/test over independent splits")
    _common(p, seed_required=True)
    p.add_argument("--n-replicates", dest="n_replicates", type=int)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("report", help="tabulate report files and method ratios")
    p.add_argument("inputs", nargs="+", help="report.json or replicates.json files")
    p.add_argument("--out", help="directory for table.csv and ratios.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
