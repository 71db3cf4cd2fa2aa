"""Command line entry point: ``giks gen|train|eval|sweep|hsic``.

Exit codes: 0 success, 2 usage or validation error, 3 training abort,
4 corrupt artifact.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as gdata
from . import metrics
from .augment import AugmentRecord, read_augmented
from .errors import ConfigError, GiksError, IntegrityError, ParseError, SpecError, TrainingError
from .model import ModelState
from .trainer import GiksConfig, train_giks

logger = logging.getLogger("giks")

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_CORRUPT = 0, 2, 3, 4
VOLATILE_REPORT_KEYS = ("wall_seconds",)
ARMS = {"factual": (False, False), "gi": (True, False), "ks": (False, True), "giks": (True, True)}


class UsageError(GiksError):
    pass


# --------------------------------------------------------------------------
# run configuration


@dataclass
class MetricOptions:
    grid_size: int = 65
    amse_draws: int = 200

    def __post_init__(self):
        if self.grid_size < 2 or self.amse_draws < 1:
            raise ConfigError("grid_size must be >= 2 and amse_draws >= 1")


@dataclass
class RunConfig:
    """Everything a train or sweep invocation needs, loaded from JSON."""

    data: str | None = None
    generator: dict | None = None
    training: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    out: str = "run"
    seeds: list = field(default_factory=lambda: [0])
    val_fraction: float = 0.3

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def validate(self):
        if not isinstance(self.training, dict) or not isinstance(self.metrics, dict):
            raise ConfigError("training and metrics must be JSON objects")
        GiksConfig.from_dict(self.training)
        self.metric_options()
        if self.generator is not None:
            gdata.GeneratorSpec.from_dict(self.generator)
        if not (isinstance(self.seeds, list) and all(isinstance(s, int) for s in self.seeds)):
            raise ConfigError("seeds must be a list of integers")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    def metric_options(self):
        unknown = set(self.metrics) - {f.name for f in fields(MetricOptions)}
        if unknown:
            raise ConfigError(f"unknown metrics keys: {sorted(unknown)}")
        return MetricOptions(**self.metrics)

    def training_config(self, **overrides):
        base = dict(self.training)
        base.update({k: v for k, v in overrides.items() if v is not None})
        if self.generator is not None and not {"learning_rate", "lambda_gi", "lambda_ks"} & set(self.training):
            return GiksConfig.for_dataset(self.generator["kind"], **base)
        return GiksConfig.from_dict(base)


# --------------------------------------------------------------------------
# helpers


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _jsonable(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    return v


def _load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    meta_path = gdata.default_meta_path(path)
    return gdata.load(path, meta_path if meta_path.exists() else None)


def _training_split(dataset, val_fraction, seed):
    return gdata.split(dataset, val_fraction, seed)


def train_run(dataset, data_path, config: GiksConfig, out_dir, val_fraction=0.3):
    """Train on ``dataset`` and write model.json, report.json and augmented.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = _training_split(dataset, val_fraction, config.seed)
    header = {
        "data": str(data_path),
        "val_fraction": val_fraction,
        "split_seed": config.seed,
        "config": config.to_dict(),
        "label": config.label,
    }
    try:
        model, report, record = train_giks(train, val, config)
    except TrainingError as exc:
        _write_json(out / "report.json", _jsonable(dict(header, status="aborted", error=str(exc),
                                                        block=exc.block, diagnostics=exc.diagnostics)))
        raise
    model.info = dict(header, train_treatments=train.t.tolist(), best_val_rmse=report.best_val_rmse)
    model.save(out / "model.json")
    _write_json(out / "report.json", _jsonable(dict(header, status="ok", report=report.to_dict())))
    export = AugmentRecord()
    export.add(np.arange(len(train)), "observed", train.t, train.y)
    export.rows.extend(record.rows)
    export.write_csv(out / "augmented.csv")
    return model, report, train, val


def select_split(dataset, model, which):
    if which == "all":
        return dataset
    info = model.info or {}
    if "val_fraction" not in info:
        raise UsageError("checkpoint does not record its split; use --split all")
    train, val = _training_split(dataset, info["val_fraction"], info["split_seed"])
    return train if which == "train" else val


def write_adrf(path, model, X, grid_size):
    grid, curves = metrics.adrf_curves(model, X, grid_size)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_index", "t", "y_hat"])
        for i, row in enumerate(curves):
            for t, y in zip(grid, row):
                w.writerow([i, f"{t:.17g}", f"{y:.17g}"])
        for t, y in zip(grid, curves.mean(axis=0)):
            w.writerow(["mean", f"{t:.17g}", f"{y:.17g}"])


def evaluate_model(model, dataset, oracle, options: MetricOptions, seed=0):
    pool = (model.info or {}).get("train_treatments")
    report = metrics.evaluate(model, dataset, oracle, pool, options.grid_size, options.amse_draws, seed)
    return report


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    try:
        spec = gdata.GeneratorSpec(kind=args.kind, n=args.n, d=args.d, seed=args.seed,
                                   dosage_bias=args.dosage_bias, variant=args.variant, n_test=args.n_test)
    except (SpecError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    data, test, _ = gdata.generate(spec)
    out = Path(args.out)
    gdata.save(data, out / "data.csv")
    if test is not None:
        gdata.save(test, out / "test.csv")
    print(out / "data.csv")
    return EXIT_OK


def cmd_train(args):
    run = RunConfig.load(args.config) if args.config else RunConfig()
    data_path = args.data or run.data
    if not data_path:
        raise UsageError("no dataset given (--data or 'data' in the config)")
    dataset = _load_dataset(data_path)
    overrides = dict(seed=args.seed, lambda_gi=args.lambda_gi, lambda_ks=args.lambda_ks,
                     learning_rate=args.learning_rate, epochs=args.epochs,
                     pretrain_epochs=args.pretrain_epochs, sampler=args.sampler)
    if run.generator is None and dataset.meta and "generator" in dataset.meta:
        run.generator = dataset.meta["generator"]
    config = run.training_config(**overrides)
    val_fraction = args.val_fraction if args.val_fraction is not None else run.val_fraction
    out = Path(args.out or run.out)
    _, report, _, _ = train_run(dataset, data_path, config, out, val_fraction)
    print(f"{config.label}: best epoch {report.best_epoch}, val rmse {report.best_val_rmse:.6g} -> {out}")
    return EXIT_OK


def cmd_eval(args):
    model = ModelState.load(args.model)
    dataset = _load_dataset(args.data)
    subset = select_split(dataset, model, args.split)
    oracle = None if args.no_oracle else gdata.oracle_from_meta(dataset.meta)
    options = MetricOptions(args.grid_size, args.amse_draws)
    report = evaluate_model(model, subset, oracle, options, args.seed)
    out = Path(args.out) if args.out else Path(args.model).parent / "metrics.json"
    _write_json(out, _jsonable(dict(report.to_dict(), split=args.split, n=len(subset))))
    if args.adrf_out:
        write_adrf(args.adrf_out, model, subset.X, options.grid_size)
    print(json.dumps(_jsonable(report.to_dict())))
    return EXIT_OK


def _sweep_seed(run: RunConfig, seed, arms, out_root, lambda_overrides):
    """Train every arm for one seed; returns a list of row dicts."""
    spec = gdata.GeneratorSpec.from_dict(dict(run.generator, seed=seed))
    data, test, oracle = gdata.generate(spec)
    seed_dir = Path(out_root) / f"seed_{seed}"
    data_path = seed_dir / "data.csv"
    gdata.save(data, data_path)
    options = run.metric_options()
    base = run.training_config(seed=seed, **lambda_overrides)
    rows = []
    for arm in arms:
        use_gi, use_ks = ARMS[arm]
        config = replace(base, lambda_gi=base.lambda_gi if use_gi else 0.0,
                         lambda_ks=base.lambda_ks if use_ks else 0.0)
        row = {"arm": arm, "seed": seed}
        try:
            model, report, train, val = train_run(data, data_path, config, seed_dir / arm, run.val_fraction)
            target = test if test is not None else val
            m = evaluate_model(model, target, oracle, options, seed)
            _write_json(seed_dir / arm / "metrics.json", _jsonable(m.to_dict()))
            row.update(status="ok", cf_error=m.cf_error, amse=m.amse, dpe=m.dpe,
                       factual_rmse=m.factual_rmse, best_epoch=report.best_epoch)
        except (TrainingError, GiksError, ArithmeticError, ValueError) as exc:
            logger.warning("seed %s arm %s failed: %s", seed, arm, exc)
            row.update(status="failed", error=str(exc))
        rows.append(row)
    return rows


def sweep(run: RunConfig, seeds, arms, out_root, threads=1, lambda_overrides=None):
    """Run every seed (optionally in parallel) and aggregate per arm."""
    lambda_overrides = lambda_overrides or {}
    Path(out_root).mkdir(parents=True, exist_ok=True)
    if threads > 1 and len(seeds) > 1:
        with cf.ProcessPoolExecutor(max_workers=min(threads, len(seeds))) as pool:
            futures = [pool.submit(_sweep_seed, run, s, arms, out_root, lambda_overrides) for s in seeds]
            per_seed = [f.result() for f in futures]
    else:
        per_seed = [_sweep_seed(run, s, arms, out_root, lambda_overrides) for s in seeds]
    rows = [r for rs in per_seed for r in rs]
    failed = [r for r in rows if r["status"] != "ok"]
    aggregate, p_values = {}, {}
    ok_seeds = [s for s in seeds if all(r["status"] == "ok" for r in rows if r["seed"] == s)]
    cf_by_arm = {}
    for arm in arms:
        vals = np.array([r["cf_error"] for r in rows if r["arm"] == arm and r["seed"] in ok_seeds])
        cf_by_arm[arm] = vals
        aggregate[arm] = {
            "cf_error_mean": float(vals.mean()) if vals.size else None,
            "cf_error_std": float(vals.std(ddof=1)) if vals.size > 1 else None,
            "n": int(vals.size),
        }
    if "giks" in arms and len(ok_seeds) >= 2:
        for arm in arms:
            if arm != "giks":
                p_values[f"{arm}_vs_giks"] = metrics.paired_ttest_onesided(cf_by_arm[arm], cf_by_arm["giks"])
    result = {"seeds": list(seeds), "arms": list(arms), "rows": rows, "aggregate": aggregate,
              "p_values": p_values, "partial": bool(failed), "failures": failed}
    _write_json(Path(out_root) / "sweep.json", _jsonable(result))
    _write_sweep_csv(Path(out_root) / "sweep.csv", rows, aggregate, arms)
    return result


def _write_sweep_csv(path, rows, aggregate, arms):
    cols = ["arm", "seed", "status", "cf_error", "amse", "dpe", "factual_rmse"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for arm in arms:
            for r in rows:
                if r["arm"] == arm:
                    w.writerow([r.get(c, "") if r.get(c) is not None else "" for c in cols])
            agg = aggregate[arm]
            mean = agg["cf_error_mean"]
            w.writerow([arm, "mean", "aggregate", "" if mean is None else mean, "", "", ""])


def cmd_sweep(args):
    run = RunConfig.load(args.config)
    if run.generator is None:
        raise UsageError("sweep needs a 'generator' section in the config")
    seeds = args.seeds if args.seeds else run.seeds
    if len(seeds) < 2:
        raise UsageError("sweep needs at least two seeds")
    arms = list(ARMS) if args.ablate_losses else ["factual", "giks"]
    try:
        threads = max(1, int(os.environ.get("GIKS_THREADS", "1")))
    except ValueError as exc:
        raise UsageError("GIKS_THREADS must be an integer") from exc
    overrides = {k: v for k, v in dict(lambda_gi=args.lambda_gi, lambda_ks=args.lambda_ks).items()
                 if v is not None}
    result = sweep(run, seeds, arms, args.out or run.out, threads, overrides)
    for arm, agg in result["aggregate"].items():
        print(f"{arm:8s} cf_error mean {agg['cf_error_mean']} std {agg['cf_error_std']} (n={agg['n']})")
    for k, p in result["p_values"].items():
        print(f"{k}: p = {p:.4g}")
    if result["partial"]:
        print(f"partial sweep: {len(result['failures'])} failed runs", file=sys.stderr)
    return EXIT_OK


def cmd_hsic(args):
    run_dir = Path(args.run)
    aug_path = run_dir / "augmented.csv"
    report_path = run_dir / "report.json"
    if not aug_path.exists() or not report_path.exists():
        raise UsageError(f"{run_dir} has no augmented-pairs export")
    try:
        header = json.loads(report_path.read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt report: {exc}") from exc
    dataset = _load_dataset(header["data"])
    train, _ = _training_split(dataset, header["val_fraction"], header["split_seed"])
    aug = read_augmented(aug_path)
    inferred = aug["t_source"] != "observed"
    aug = {k: v[inferred] for k, v in aug.items()}
    if aug["instance_index"].size and aug["instance_index"].max() >= len(train):
        raise IntegrityError("augmented export refers to rows outside the training split")
    observed, augmented = metrics.augmented_hsic(train.X, train.t, aug["instance_index"], aug["t_value"])
    null = metrics.hsic_permutation_null(train.X, train.t, args.n_perm, args.seed)
    result = {
        "hsic_observed": observed,
        "hsic_augmented": augmented,
        "reduction_ratio": None if augmented is None else augmented / observed,
        "n_observed": len(train),
        "n_augmented": int(aug["instance_index"].size),
        "observed_null_p95": float(np.percentile(null, 95)),
        "observed_perm_pvalue": float((1 + np.sum(null >= observed)) / (1 + null.size)),
    }
    out = Path(args.out) if args.out else run_dir / "hsic.json"
    _write_json(out, _jsonable(result))
    print(json.dumps(_jsonable(result)))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="giks", description="Continuous treatment effect estimation with GIKS.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    g.add_argument("--kind", required=True)
    g.add_argument("--n", type=int, default=700)
    g.add_argument("--d", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dosage-bias", type=float, default=2.0)
    g.add_argument("--variant", type=int, default=None)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--lambda-gi", type=float)
    t.add_argument("--lambda-ks", type=float)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--sampler", choices=["uniform", "marginal", "inverse-propensity"])
    t.add_argument("--val-fraction", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["all", "train", "val"], default="all")
    e.add_argument("--out")
    e.add_argument("--adrf-out")
    e.add_argument("--grid-size", type=int, default=65)
    e.add_argument("--amse-draws", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-oracle", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="multi-seed comparison against the factual baseline")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--out")
    s.add_argument("--ablate-losses", action="store_true")
    s.add_argument("--lambda-gi", type=float)
    s.add_argument("--lambda-ks", type=float)
    s.set_defaults(func=cmd_sweep)

    h = sub.add_parser("hsic", help="covariate/treatment dependence before and after augmentation")
    h.add_argument("--run", required=True)
    h.add_argument("--out")
    h.add_argument("--n-perm", type=int, default=200)
    h.add_argument("--seed", type=int, default=0)
    h.set_defaults(func=cmd_hsic)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (IntegrityError, ParseError) as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (UsageError, ConfigError, SpecError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
