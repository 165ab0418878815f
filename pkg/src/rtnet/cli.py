"""Command-line front end.

Subcommands: relate, train, eval, sweep, pacf, experiment, plot.  All outputs
land under --out, stdout carries machine-readable JSON only (for `eval`), and
human-readable logs go to stderr.  A lock file serializes invocations per
output directory.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv as csv_mod
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import harness
from .data import SplitSpec, load_csv, split, standardize
from .diagnostics import input_length_sweep, line_plot_svg, pacf, sweep_svg
from .errors import ConfigError, RTNetError
from .model import ModelConfig, RTNet, load_checkpoint, save_checkpoint
from .relation import cos_relation_matrix, relation_csv, threshold_and_standardize
from .training import TrainConfig, train_contrastive, train_end_to_end, evaluate

LOCK_NAME = ".rtnet.lock"


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


@dataclass
class CliConfig:
    subcommand: str
    args: dict = field(default_factory=dict)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtnet", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, data=True, out=True, config=False):
        if data:
            p.add_argument("--data", required=True, help="input CSV path")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--split-mode", choices=("ratio", "months"), default="ratio")

    p = sub.add_parser("relate", help="emit raw and processed relation matrices as CSV")
    common(p)
    p.add_argument("--theta", type=float, default=45.0)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    common(p, config=True)
    p.add_argument("--fidelity", choices=("desk", "paper"), default="desk")
    p.add_argument("--format", choices=("e2e", "contrastive"), default="e2e")

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints JSON metrics to stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split-mode", choices=("ratio", "months"), default="ratio")
    p.add_argument("--split", choices=("val", "test"), default="test")

    p = sub.add_parser("sweep", help="input-length sweep")
    common(p, config=True)
    p.add_argument("--fidelity", choices=("desk", "paper"), default="desk")
    p.add_argument("--format", choices=("e2e", "contrastive"), default="e2e")

    p = sub.add_parser("pacf", help="partial autocorrelation of the target variate")
    common(p)
    p.add_argument("--max-lag", type=int, default=48)

    p = sub.add_parser("experiment", help="run an experiment spec")
    p.add_argument("--spec", required=True, help="ExperimentSpec JSON path")
    p.add_argument("--out", required=True)
    p.add_argument("--compare-formats", action="store_true")

    p = sub.add_parser("plot", help="convert a sweep CSV into an SVG line plot")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    return parser


def parse_args(argv: list[str]) -> CliConfig:
    """Validated CLI config; duplicated --seed warns and keeps the last value."""
    if sum(1 for a in argv if a == "--seed") > 1:
        log("warning: --seed given more than once; the last value wins")
    ns = _build_parser().parse_args(argv)
    return CliConfig(subcommand=ns.subcommand,
                     args={k: v for k, v in vars(ns).items() if k != "subcommand"})


class OutDirLock:
    def __init__(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, LOCK_NAME)
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RTNetError(f"output directory is locked by {self.path}; "
                             "remove the stale lock if no other run is active") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)


def _load_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _strict_job(config: dict) -> dict:
    allowed = {"task", "use_relation", "model", "train"}
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    job = {"task": "univariate", "use_relation": True, "model": {}, "train": {}}
    job.update(config)
    if job["task"] not in ("univariate", "multivariate"):
        raise ConfigError(f"task must be univariate or multivariate, got {job['task']!r}")
    return job


def _prepare(data_path: str, split_mode: str, task: str):
    ds = load_csv(data_path)
    if task == "univariate":
        ds = ds.select_variates([ds.target_index])
    parts = split(ds, SplitSpec(mode=split_mode))
    (train_ds, val_ds, test_ds), scaler = standardize(*parts, guard_eps=1e-8)
    return train_ds, val_ds, test_ds, scaler


def _resolve_configs(job: dict, fidelity: str, seed: int, n_variates: int):
    spec = harness.ExperimentSpec(data_path="", pred_lengths=[24], seeds=[seed],
                                  task=job["task"], fidelity=fidelity)
    groups = n_variates if (job["task"] == "multivariate" and job["use_relation"]) else 1
    model_d = harness._merged(harness.default_model_dict(spec, n_variates, groups),
                              job["model"], "model")
    model_d["n_variates"] = n_variates
    model_d["groups"] = groups
    train_d = harness._merged(harness.default_train_dict(spec), job["train"], "train")
    train_d["seed"] = seed
    mcfg = ModelConfig.from_dict(model_d)
    tcfg = TrainConfig(**train_d)
    tcfg.validate()
    return mcfg, tcfg


def _cmd_relate(args: dict) -> int:
    ds = load_csv(args["data"])
    train_ds, _, _ = split(ds, SplitSpec(mode=args["split_mode"]))
    (train_std,), _ = standardize(train_ds, guard_eps=1e-8)
    raw = cos_relation_matrix(train_std.values, train_std.variate_names)
    processed = threshold_and_standardize(raw, args["theta"])
    out = args["out"]
    with open(os.path.join(out, "relation_raw.csv"), "w", encoding="utf-8") as fh:
        fh.write(relation_csv(raw, train_std.variate_names))
    with open(os.path.join(out, "relation_processed.csv"), "w", encoding="utf-8") as fh:
        fh.write(relation_csv(processed, train_std.variate_names))
    log(f"wrote relation matrices for {len(train_std.variate_names)} variates to {out}")
    return 0


def _cmd_train(args: dict) -> int:
    job = _strict_job(_load_json(args["config"]))
    train_ds, val_ds, test_ds, scaler = _prepare(args["data"], args["split_mode"], job["task"])
    mcfg, tcfg = _resolve_configs(job, args["fidelity"], args["seed"], train_ds.n_variates)
    relation = None
    if job["task"] == "multivariate" and job["use_relation"]:
        raw = cos_relation_matrix(train_ds.values, train_ds.variate_names)
        relation = threshold_and_standardize(raw, mcfg.theta_degrees)
    model = RTNet(mcfg, np.random.default_rng(args["seed"]), relation=relation)
    trainer = train_contrastive if args["format"] == "contrastive" else train_end_to_end
    log(f"training {args['format']} model: {mcfg}")
    result = trainer(model, train_ds, val_ds, tcfg)
    out = args["out"]
    save_checkpoint(model, os.path.join(out, "checkpoint.rtnet"))
    result.write_history_csv(os.path.join(out, "history.csv"))
    with open(os.path.join(out, "scaler.json"), "w", encoding="utf-8") as fh:
        fh.write(scaler.to_json())
    mse, mae = evaluate(model, test_ds)
    log(f"best epoch {result.best_epoch}; test mse {mse:.6f}, mae {mae:.6f}")
    return 0


def _cmd_eval(args: dict) -> int:
    model = load_checkpoint(args["checkpoint"])
    task = "univariate" if model.cfg.n_variates == 1 else "multivariate"
    _, val_ds, test_ds, _ = _prepare(args["data"], args["split_mode"], task)
    ds = val_ds if args["split"] == "val" else test_ds
    mse, mae = evaluate(model, ds)
    print(json.dumps({"split": args["split"], "mse": mse, "mae": mae}))
    return 0


def _cmd_sweep(args: dict) -> int:
    config = _load_json(args["config"])
    allowed = {"lengths", "seeds", "task", "use_relation", "model", "train"}
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown sweep config keys: {sorted(unknown)}")
    lengths = config.get("lengths")
    if not lengths:
        raise ConfigError("sweep config needs a non-empty 'lengths' list")
    seeds = config.get("seeds", [args["seed"]])
    job = _strict_job({k: config[k] for k in ("task", "use_relation", "model", "train")
                       if k in config})
    train_ds, val_ds, test_ds, _ = _prepare(args["data"], args["split_mode"], job["task"])

    def admissible(length: int) -> bool:
        job_l = dict(job, model=dict(job["model"], l_in=length))
        try:
            mcfg, _ = _resolve_configs(job_l, args["fidelity"], 0, train_ds.n_variates)
            return len(train_ds) >= mcfg.l_in + mcfg.l_out
        except RTNetError as exc:
            log(f"length {length} skipped: {exc}")
            return False

    def run_cell(length: int, seed: int) -> tuple[float, float]:
        job_l = dict(job, model=dict(job["model"], l_in=length))
        mcfg, tcfg = _resolve_configs(job_l, args["fidelity"], seed, train_ds.n_variates)
        model = RTNet(mcfg, np.random.default_rng(seed))
        trainer = train_contrastive if args["format"] == "contrastive" else train_end_to_end
        trainer(model, train_ds, val_ds, tcfg)
        return evaluate(model, test_ds)

    result = input_length_sweep([int(l) for l in lengths], [int(s) for s in seeds],
                                run_cell, admissible)
    out = args["out"]
    with open(os.path.join(out, "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv_mod.writer(fh)
        w.writerow(["length", "mean_mse", "std_mse", "mean_mae", "std_mae"])
        for row in result.rows():
            w.writerow([row["length"], row["mean_mse"], row["std_mse"],
                        row["mean_mae"], row["std_mae"]])
    with open(os.path.join(out, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump({"rows": result.rows(), "best_length": result.best_length,
                   "near_best": result.near_best,
                   "skipped": [{"length": l, "reason": r} for l, r in result.skipped]},
                  fh, indent=2)
    with open(os.path.join(out, "sweep.svg"), "w", encoding="utf-8") as fh:
        fh.write(sweep_svg(result))
    log(f"sweep complete; best length {result.best_length}")
    return 0


def _cmd_pacf(args: dict) -> int:
    ds = load_csv(args["data"])
    train_ds, _, _ = split(ds, SplitSpec(mode=args["split_mode"]))
    series = train_ds.values[:, train_ds.target_index]
    result = pacf(series, args["max_lag"])
    out_path = os.path.join(args["out"], "pacf.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv_mod.writer(fh)
        w.writerow(["lag", "phi_kk", "confidence_band"])
        for lag, phi in zip(result.lags, result.phi):
            w.writerow([int(lag), f"{phi:.8f}", f"{result.confidence_band:.8f}"])
    log(f"wrote PACF for {train_ds.variate_names[train_ds.target_index]!r} to {out_path}")
    return 0


def _cmd_experiment(args: dict) -> int:
    with open(args["spec"], encoding="utf-8") as fh:
        spec = harness.ExperimentSpec.from_json(fh.read())
    runner = harness.compare_formats if args["compare_formats"] else harness.run_experiment
    report = runner(spec)
    report.write(args["out"])
    failed = [c for c in report.cells if c.status != "ok"]
    for c in failed:
        log(f"cell failed: axis={c.axis_value} pred={c.pred_len} seed={c.seed}: {c.reason}")
    if report.all_failed():
        raise RTNetError("every experiment cell failed")
    log(f"experiment complete: {len(report.cells) - len(failed)}/{len(report.cells)} cells ok")
    return 0


def _cmd_plot(args: dict) -> int:
    with open(args["infile"], newline="", encoding="utf-8") as fh:
        rows = list(csv_mod.DictReader(fh))
    if not rows or "length" not in rows[0]:
        raise ConfigError(f"{args['infile']} is not a sweep CSV")
    xs = [float(r["length"]) for r in rows]
    series = {"mean MSE": [float(r["mean_mse"]) for r in rows]}
    if "mean_mae" in rows[0]:
        series["mean MAE"] = [float(r["mean_mae"]) for r in rows]
    svg = line_plot_svg(xs, series, "Forecast error vs input length", "input length", "error")
    out_path = os.path.join(args["out"], "sweep.svg")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    log(f"wrote {out_path}")
    return 0


_COMMANDS = {
    "relate": _cmd_relate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "pacf": _cmd_pacf,
    "experiment": _cmd_experiment,
    "plot": _cmd_plot,
}


def dispatch(config: CliConfig) -> int:
    """Run one subcommand: 0 on success, 1 on runtime failure."""
    fn = _COMMANDS[config.subcommand]
    try:
        if "out" in config.args:
            with OutDirLock(config.args["out"]):
                return fn(config.args)
        return fn(config.args)
    except RTNetError as exc:
        log(f"error: {exc}")
        return 1
    except OSError as exc:
        log(f"error: {exc}")
        return 1


def main(argv: list[str] | None = None) -> int:
    config = parse_args(sys.argv[1:] if argv is None else argv)
    return dispatch(config)


if __name__ == "__main__":
    sys.exit(main())
