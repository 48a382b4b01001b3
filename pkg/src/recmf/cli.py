"""Command-line frontend: reproducible prepare / train / benchmark / sweep runs.

    recmf prepare   --dataset ml100k --scenario extracted-features
    recmf train     --dataset ml100k --method RMF --f 50
    recmf benchmark --dataset ml100k --method UCF,ICF,RMF,MLIMF --f 20,50
    recmf sweep dimension --dataset ml100k --method RMF,MLIMF --f 50,100,200
    recmf stats     --dataset ml100k --factor RD

Settings resolve from built-in defaults, then a flat ``key=value`` config
file (``--config``), then command-line flags.  Raw datasets are looked up
under ``$RECMF_DATA_ROOT`` (default ``./data``) in the stock archive
layouts.  Every run writes its outputs plus a ``manifest.json`` (resolved
config, seeds, input digests, library versions) into one directory so the
run can be replayed exactly.  Exit status: 0 on success, 1 when a stage or
a requested tolerance assertion fails, 2 for usage or input errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numba
import numpy as np

from . import __version__
from .datasets import parse_ml100k, parse_ml1m, write_records
from .evaluation import (
    MF_METHODS,
    METHODS,
    ExperimentPlan,
    MethodSpec,
    assert_tolerances,
    dimension_sweep,
    lambda_sweep,
    run_crossval,
    run_temporal,
    write_report_csv,
    write_summary,
)
from .exceptions import (
    DivergenceError,
    EvaluationError,
    ParseError,
    ValidationError,
)
from .factorization import MLIMF, RMF, save_model, write_trace
from .factors import (
    FactorSchema,
    extract_feature_factors,
    extract_temporal_factor,
    factor_rating_stats,
    read_augmented,
    write_augmented,
    write_factor_stats,
)

DATASETS = ("ml100k", "ml1m")
SCENARIOS = ("extracted-features", "temporal")


class _CliError(Exception):
    """Carries a message and process exit code through command handlers."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# settings: defaults < config file < flags


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from None


def _method_list(text: str) -> tuple[str, ...]:
    names = tuple(x.strip() for x in text.split(",") if x.strip())
    for n in names:
        if n not in METHODS:
            raise ValueError(f"unknown method {n!r}; expected one of {METHODS}")
    return names


def _choice(options):
    def cast(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text

    return cast


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise ValueError(f"expected 'on' or 'off', got {text!r}")
    return text == "on"


_CASTS = {
    "dataset": _choice(DATASETS),
    "scenario": _choice(SCENARIOS),
    "data_root": str,
    "out": str,
    "name": str,
    "prepared": str,
    "method": _method_list,
    "f": _int_list,
    "lambda": _float_list,
    "gamma": float,
    "eta": float,
    "eta_decay": float,
    "eta_decay_start": int,
    "seed": int,
    "runs": int,
    "k": int,
    "jobs": int,
    "sim_variant": _choice(("standard", "literal")),
    "top_fraction": float,
    "clamp": _on_off,
    "stop_on_holdout": _on_off,
    "max_epochs": int,
    "patience": int,
    "init_sigma": float,
    "validation_fraction": float,
    "factor": str,
    "assert_tolerances": _on_off,
}

DEFAULTS = {
    "dataset": None,
    "scenario": "extracted-features",
    "data_root": None,
    "out": "recmf-out",
    "name": None,
    "prepared": None,
    "method": None,
    "f": None,
    "lambda": (0.01,),
    "gamma": 0.01,
    "eta": 0.01,
    "eta_decay": 0.9,
    "eta_decay_start": 5,
    "seed": 0,
    "runs": 5,
    "k": 5,
    "jobs": 1,
    "sim_variant": "standard",
    "top_fraction": 0.25,
    "clamp": True,
    "stop_on_holdout": False,
    "max_epochs": 120,
    "patience": 3,
    "init_sigma": 0.02,
    "validation_fraction": 0.05,
    "factor": None,
    "assert_tolerances": False,
}

# argparse attribute -> settings key ("lambda" is a reserved word)
_FLAG_KEYS = {"lam": "lambda"}


def _load_config(path) -> dict:
    """Flat key=value file; '#' starts a comment, blank lines ignored."""
    raw = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"config line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key.replace("-", "_")] = (value, lineno)
    return raw


def _resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        for key, (value, lineno) in _load_config(args.config).items():
            if key not in DEFAULTS:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
            try:
                settings[key] = _CASTS[key](value)
            except ValueError as exc:
                raise ValidationError(f"config line {lineno}: {exc}") from None
    for attr, value in vars(args).items():
        if attr in ("command", "config", "axis") or value is None:
            continue
        key = _FLAG_KEYS.get(attr, attr)
        if key == "method":
            value = tuple(n for chunk in value for n in chunk)
        settings[key] = value
    return settings


# ---------------------------------------------------------------------------
# shared plumbing


def _data_root(settings) -> Path:
    if settings["data_root"]:
        return Path(settings["data_root"])
    return Path(os.environ.get("RECMF_DATA_ROOT", "data"))


def _dataset_paths(dataset: str, root: Path) -> tuple[Path, Path]:
    if dataset == "ml100k":
        return root / "ml-100k" / "u.data", root / "ml-100k" / "u.item"
    return root / "ml-1m" / "ratings.dat", root / "ml-1m" / "movies.dat"


def _prepared_dir(settings) -> Path:
    if settings["prepared"]:
        return Path(settings["prepared"])
    if not settings["dataset"]:
        raise _CliError("--dataset (or --prepared) is required")
    return Path(settings["out"]) / "prepared" / f"{settings['dataset']}-{settings['scenario']}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(outdir: Path, command: str, settings: dict, seeds, inputs) -> None:
    manifest = {
        "command": command,
        "config": {
            k: list(v) if isinstance(v, tuple) else v for k, v in sorted(settings.items())
        },
        "seeds": [int(s) for s in seeds],
        "input_digests": {p.name: _sha256(p) for p in inputs},
        "versions": {
            "numba": numba.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "recmf": __version__,
        },
    }
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_prepared(settings):
    pdir = _prepared_dir(settings)
    paths = {name: pdir / name for name in ("augmented.tsv", "schema.json", "meta.json")}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise _CliError(
            "prepared files not found (run `recmf prepare` first): " + ", ".join(missing)
        )
    schema = FactorSchema.from_json(paths["schema.json"].read_text(encoding="utf-8"))
    meta = json.loads(paths["meta.json"].read_text(encoding="utf-8"))
    records = read_augmented(
        paths["augmented.tsv"],
        schema,
        name=meta["dataset"],
        n_users=meta["n_users"],
        n_items=meta["n_items"],
    )
    return records, meta, pdir


def _run_dir(settings, default_name: str) -> Path:
    outdir = Path(settings["out"]) / "runs" / (settings["name"] or default_name)
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def _single(values, flag: str):
    if values is not None and len(values) != 1:
        raise _CliError(f"{flag} takes a single value here, got {len(values)}")
    return None if values is None else values[0]


def _mf_params(settings, method: str, lam: float | None = None) -> dict:
    params = {
        "lam": _single(settings["lambda"], "--lambda") if lam is None else lam,
        "gamma": settings["gamma"],
        "max_epochs": settings["max_epochs"],
        "patience": settings["patience"],
        "init_sigma": settings["init_sigma"],
        "clamp_predictions": settings["clamp"],
        "validation_fraction": settings["validation_fraction"],
    }
    if method == "MLIMF":
        params["eta"] = settings["eta"]
        params["eta_decay"] = settings["eta_decay"]
        params["eta_decay_start"] = settings["eta_decay_start"]
    return params


def _baseline_params(settings) -> dict:
    return {"variant": settings["sim_variant"], "top_fraction": settings["top_fraction"]}


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(settings) -> int:
    dataset = settings["dataset"]
    if not dataset:
        raise _CliError("--dataset is required")
    scenario = settings["scenario"]
    ratings_path, items_path = _dataset_paths(dataset, _data_root(settings))
    missing = [str(p) for p in (ratings_path, items_path) if not p.exists()]
    if missing:
        raise _CliError("missing input file: " + ", ".join(missing))
    try:
        parse = parse_ml100k if dataset == "ml100k" else parse_ml1m
        ds = parse(ratings_path, items_path)
        ds.name = dataset
        if scenario == "temporal":
            aug = extract_temporal_factor(ds)
        else:
            aug = extract_feature_factors(ds)
    except (ParseError, ValidationError) as exc:
        raise _CliError(f"cannot parse {dataset}: {exc}") from exc

    # inputs fully validated; only now touch the output directory
    outdir = _prepared_dir(settings)
    outdir.mkdir(parents=True, exist_ok=True)
    write_records(ds, outdir / "records.tsv")
    write_augmented(aug, outdir / "augmented.tsv")
    (outdir / "schema.json").write_text(aug.schema.to_json() + "\n", encoding="utf-8")
    meta = {
        "dataset": dataset,
        "scenario": scenario,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "n_records": len(ds),
        "user_ids": None if ds.user_ids is None else [int(u) for u in ds.user_ids],
        "item_ids": None if ds.item_ids is None else [int(i) for i in ds.item_ids],
    }
    (outdir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for factor in aug.schema.factors:
        rows = factor_rating_stats(aug, factor.name)
        write_factor_stats(rows, outdir / f"stats-{factor.name}.csv")
    _write_manifest(outdir, "prepare", settings, [], [ratings_path, items_path])
    print(
        f"prepared {dataset} {scenario}: {len(aug)} records, "
        f"{ds.n_users} users, {ds.n_items} items -> {outdir}"
    )
    return 0


def cmd_train(settings) -> int:
    records, meta, pdir = _load_prepared(settings)
    scenario = meta["scenario"]
    method = _single(settings["method"], "--method") if settings["method"] else None
    if method is None:
        raise _CliError("--method is required")
    if method not in MF_METHODS:
        raise _CliError(
            f"train supports factorization methods {MF_METHODS}; use benchmark for {method}"
        )
    f = _single(settings["f"], "--f")
    f = 50 if f is None else f
    params = _mf_params(settings, method)
    params["seed"] = settings["seed"]
    if method == "RMF":
        est = RMF(f=f, **params)
    else:
        est = MLIMF(f=f, application=scenario, **params)
    try:
        est.fit(records)
    except DivergenceError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1

    outdir = _run_dir(settings, f"train-{meta['dataset']}-{scenario}-{method.lower()}-f{f}")
    save_model(est, outdir / "model.npz")
    write_trace(est.trace_, outdir / "trace.csv")
    _write_manifest(
        outdir, "train", settings, [settings["seed"]],
        [pdir / "augmented.tsv", pdir / "schema.json"],
    )
    b = est.budget_
    budget = "/".join(str(x) for x in (b.f_item, *b.f_factor))
    print(
        f"trained {method} f={f} (budget {budget}) in {est.n_epochs_} epochs, "
        f"validation rmse {est.best_val_rmse_:.4f} -> {outdir}"
    )
    return 0


def _emit_reports(settings, command, reports, outdir, pdir, seeds) -> int:
    write_report_csv(reports, outdir / "report.csv")
    write_summary(reports, outdir / "summary.json")
    _write_manifest(
        outdir, command, settings, seeds, [pdir / "augmented.tsv", pdir / "schema.json"]
    )
    sys.stdout.write((outdir / "report.csv").read_text(encoding="utf-8"))
    print(f"wrote {outdir / 'report.csv'}")
    if settings["assert_tolerances"]:
        failures = assert_tolerances(reports)
        if failures:
            for line in failures:
                print(f"tolerance failure: {line}", file=sys.stderr)
            return 1
        print(f"all {len(reports)} rows within reference tolerances")
    return 0


def cmd_benchmark(settings) -> int:
    records, meta, pdir = _load_prepared(settings)
    scenario = meta["scenario"]
    if not settings["method"]:
        raise _CliError("no methods requested; pass --method (e.g. --method UCF,ICF,RMF,MLIMF)")
    fs = settings["f"] or (50,)
    specs = []
    for m in settings["method"]:
        if m in MF_METHODS:
            specs.extend(MethodSpec(m, f=f, params=_mf_params(settings, m)) for f in fs)
        else:
            specs.append(MethodSpec(m, params=_baseline_params(settings)))
    plan = ExperimentPlan(
        scenario=scenario,
        methods=specs,
        dataset=meta["dataset"],
        k=settings["k"],
        split_seed=settings["seed"],
        seed=settings["seed"],
        runs=settings["runs"],
        stop_on_holdout=settings["stop_on_holdout"],
        n_jobs=settings["jobs"],
    )
    try:
        runner = run_temporal if scenario == "temporal" else run_crossval
        reports = runner(plan, records)
    except EvaluationError as exc:
        print(f"benchmark failed: {exc}", file=sys.stderr)
        return 1
    outdir = _run_dir(settings, f"benchmark-{meta['dataset']}-{scenario}")
    seeds = sorted({s for r in reports for s in r.seeds})
    return _emit_reports(settings, "benchmark", reports, outdir, pdir, seeds)


def cmd_sweep(settings, axis: str) -> int:
    records, meta, pdir = _load_prepared(settings)
    scenario = meta["scenario"]
    methods = settings["method"] or MF_METHODS
    bad = [m for m in methods if m not in MF_METHODS]
    if bad:
        raise _CliError(f"sweeps cover factorization methods only, got {bad}")
    # on the lambda axis the sweep overwrites lam point by point
    lam = settings["lambda"][0] if axis == "lambda" else None
    specs = tuple(MethodSpec(m, params=_mf_params(settings, m, lam=lam)) for m in methods)
    plan = ExperimentPlan(
        scenario=scenario,
        methods=specs,
        dataset=meta["dataset"],
        k=settings["k"],
        split_seed=settings["seed"],
        seed=settings["seed"],
        runs=settings["runs"],
        stop_on_holdout=settings["stop_on_holdout"],
        n_jobs=settings["jobs"],
    )
    try:
        if axis == "dimension":
            if not settings["f"]:
                raise _CliError("dimension sweep needs --f with a comma-separated list")
            reports = dimension_sweep(plan, settings["f"], records)
        else:
            reports = lambda_sweep(plan, settings["lambda"], records)
    except EvaluationError as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        raise _CliError(str(exc)) from exc
    outdir = _run_dir(settings, f"sweep-{axis}-{meta['dataset']}-{scenario}")
    seeds = sorted({s for r in reports for s in r.seeds})
    return _emit_reports(settings, "sweep", reports, outdir, pdir, seeds)


def cmd_stats(settings) -> int:
    records, meta, _ = _load_prepared(settings)
    names = [f.name for f in records.schema.factors]
    if settings["factor"]:
        if settings["factor"] not in names:
            raise _CliError(f"unknown factor {settings['factor']!r}; prepared factors: {names}")
        names = [settings["factor"]]
    for name in names:
        print(f"# {name}")
        print("factor_value,count,mean_rating")
        for label, count, mean in factor_rating_stats(records, name):
            print(f"{label},{count},{mean:.6g}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--dataset", type=_choice(DATASETS), help="ml100k or ml1m")
    p.add_argument("--scenario", type=_choice(SCENARIOS), help="factor scenario")
    p.add_argument("--out", help="output root directory (default recmf-out)")


def _add_prepared(p):
    p.add_argument("--prepared", help="explicit prepared-data directory")
    p.add_argument("--name", help="run directory name")


def _add_hyper(p):
    p.add_argument("--method", type=_method_list, action="append",
                   help="comma-separated method names (repeatable)")
    p.add_argument("--f", type=_int_list, help="total dimension(s), comma-separated")
    p.add_argument("--lambda", dest="lam", type=_float_list, help="regularization weight(s)")
    p.add_argument("--gamma", type=float, help="user/item learning rate")
    p.add_argument("--eta", type=float, help="factor-block learning rate (MLIMF)")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--clamp", type=_on_off, help="clamp predictions to [1, 5]: on|off")


def _add_bench(p):
    p.add_argument("--runs", type=int, help="random initializations per MF figure")
    p.add_argument("--k", type=int, help="number of cross-validation folds")
    p.add_argument("--jobs", type=int, help="parallel workers")
    p.add_argument("--sim-variant", type=_choice(("standard", "literal")),
                   help="similarity denominator variant")
    p.add_argument("--stop-on-holdout", type=_on_off,
                   help="early-stop on the held-out fold instead of an inner carve")
    p.add_argument("--assert-tolerances", action="store_const", const=True,
                   help="fail the run if any row leaves its reference tolerance band")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recmf",
        description="Matrix-factorization and neighborhood recommenders, benchmarked.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse a raw dataset and extract factors")
    _add_common(p)
    p.add_argument("--data-root", help="dataset root (overrides $RECMF_DATA_ROOT)")

    p = sub.add_parser("train", help="train one factorization model")
    _add_common(p)
    _add_prepared(p)
    _add_hyper(p)

    p = sub.add_parser("benchmark", help="run a full scenario and emit a report")
    _add_common(p)
    _add_prepared(p)
    _add_hyper(p)
    _add_bench(p)

    p = sub.add_parser("sweep", help="dimension or regularization sweep")
    p.add_argument("axis", choices=("dimension", "lambda"))
    _add_common(p)
    _add_prepared(p)
    _add_hyper(p)
    _add_bench(p)

    p = sub.add_parser("stats", help="print per-value rating statistics")
    _add_common(p)
    _add_prepared(p)
    p.add_argument("--factor", help="restrict to one factor name")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = _resolve(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    handlers = {
        "prepare": cmd_prepare,
        "train": cmd_train,
        "benchmark": cmd_benchmark,
        "stats": cmd_stats,
    }
    try:
        if args.command == "sweep":
            return cmd_sweep(settings, args.axis)
        return handlers[args.command](settings)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
