"""Experiment orchestration: ablations, format comparison, seeded statistics.

A spec names one ablation axis (normalization kind, relation matrix on/off,
input length, or time-embedding mode), a prediction-length grid, and a seed
list; every cell trains a fresh model and reports test MSE/MAE.  Cells are
independent, so a worker pool may run them concurrently; failed cells are
recorded with their reason and the run continues.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SplitSpec, TimeSeriesDataset, load_csv, split, standardize
from .errors import ConfigError, RTNetError
from .model import ModelConfig, RTNet
from .relation import cos_relation_matrix, threshold_and_standardize
from .training import TrainConfig, train_contrastive, train_end_to_end, evaluate

PAPER_PRED_GRIDS = ({24, 48, 168, 336, 720}, {24, 48, 96, 288, 672})
ABLATION_AXES = ("norm_kind", "relation", "input_length", "time_mode")
REPORT_VERSION = "RTNET1"


@dataclass
class ExperimentSpec:
    data_path: str
    pred_lengths: list[int]
    seeds: list[int]
    task: str = "univariate"
    split_mode: str = "ratio"
    ablation: str | None = None
    ablation_values: list = field(default_factory=list)
    fidelity: str = "desk"
    format: str = "e2e"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    theta_degrees: float = 45.0

    def validate(self) -> None:
        if self.task not in ("univariate", "multivariate"):
            raise ConfigError(f"task must be univariate or multivariate, got {self.task!r}")
        if self.split_mode not in ("ratio", "months"):
            raise ConfigError(f"split_mode must be ratio or months, got {self.split_mode!r}")
        if self.fidelity not in ("desk", "paper"):
            raise ConfigError(f"fidelity must be desk or paper, got {self.fidelity!r}")
        if self.format not in ("e2e", "contrastive"):
            raise ConfigError(f"format must be e2e or contrastive, got {self.format!r}")
        if self.ablation is not None and self.ablation not in ABLATION_AXES:
            raise ConfigError(f"ablation must be one of {ABLATION_AXES}, got {self.ablation!r}")
        if self.ablation is not None and not self.ablation_values:
            raise ConfigError("ablation axis given without ablation_values")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.fidelity == "paper" and not any(
                set(self.pred_lengths) <= grid for grid in PAPER_PRED_GRIDS):
            raise ConfigError(f"paper fidelity requires prediction lengths within "
                              f"{PAPER_PRED_GRIDS}, got {self.pred_lengths}")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment spec keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


def _merged(defaults: dict, overrides: dict, what: str) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {what} override keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(overrides)
    return out


def default_model_dict(spec: ExperimentSpec, n_variates: int, groups: int) -> dict:
    d_per_group = 8 if spec.fidelity == "desk" else 32
    return {
        "l_in": 168,
        "l_out": 24,
        "n_variates": n_variates,
        "d_channels": d_per_group * groups,
        "blocks": 3,
        "groups": groups,
        "n_time": 6,
        "time_mode": "none",
        "theta_degrees": spec.theta_degrees,
        "norm_kind": "wn",
        "dropout": 0.1,
        "kernel": 3,
    }


def default_train_dict(spec: ExperimentSpec) -> dict:
    if spec.fidelity == "paper":
        return {"epochs": 20, "batch_size": 16, "stage1_batch_size": 64,
                "stage2_batch_size": 16, "lr": 1e-4, "patience": 3, "alpha": 4.0,
                "n_augments": 3, "beta": 0.2, "seed": 0,
                "max_steps_per_epoch": None, "stage1_epochs": None}
    return {"epochs": 3, "batch_size": 16, "stage1_batch_size": 64,
            "stage2_batch_size": 16, "lr": 1e-3, "patience": 2, "alpha": 4.0,
            "n_augments": 3, "beta": 0.2, "seed": 0,
            "max_steps_per_epoch": 120, "stage1_epochs": None}


@dataclass
class CellResult:
    axis_value: object
    pred_len: int
    seed: int
    status: str = "ok"
    mse: float = float("nan")
    mae: float = float("nan")
    seconds: float = 0.0
    reason: str = ""


@dataclass
class ExperimentReport:
    spec: dict
    cells: list[CellResult]
    summary: list[dict]
    version: str = REPORT_VERSION

    def all_failed(self) -> bool:
        return all(c.status != "ok" for c in self.cells)

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "spec": self.spec,
                           "cells": [asdict(c) for c in self.cells],
                           "summary": self.summary}, indent=2)

    def to_csv(self) -> str:
        lines = ["axis_value,pred_len,mean_mse,std_mse,mean_mae,std_mae,n_seeds"]
        for row in self.summary:
            lines.append(f"{row['axis_value']},{row['pred_len']},{row['mean_mse']:.6f},"
                         f"{row['std_mse']:.6f},{row['mean_mae']:.6f},"
                         f"{row['std_mae']:.6f},{row['n_seeds']}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str, stem: str = "report") -> None:
        os.makedirs(out_dir, exist_ok=True)
        for ext, text in (("json", self.to_json()), ("csv", self.to_csv())):
            path = os.path.join(out_dir, f"{stem}.{ext}")
            tmp = path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)


@dataclass
class PreparedData:
    train: TimeSeriesDataset
    val: TimeSeriesDataset
    test: TimeSeriesDataset
    n_variates: int


def prepare_data(spec: ExperimentSpec) -> PreparedData:
    ds = load_csv(spec.data_path)
    if spec.task == "univariate":
        ds = ds.select_variates([ds.target_index])
    train_ds, val_ds, test_ds = split(ds, SplitSpec(mode=spec.split_mode))
    (train_ds, val_ds, test_ds), _ = standardize(train_ds, val_ds, test_ds, guard_eps=1e-8)
    return PreparedData(train_ds, val_ds, test_ds, ds.n_variates)


def _cell_configs(spec: ExperimentSpec, data: PreparedData, axis_value,
                  pred_len: int, seed: int) -> tuple[ModelConfig, TrainConfig, np.ndarray | None]:
    n = data.n_variates
    base_groups = n if spec.task == "multivariate" else 1
    use_relation = spec.task == "multivariate"
    groups = base_groups
    if spec.ablation == "relation":
        # the relation arm pairs the mixing matrix with grouped layers; the
        # bare arm is the conventional fully mixed network at equal width
        use_relation = bool(axis_value)
        groups = n if use_relation else 1

    model_d = _merged(default_model_dict(spec, n, base_groups), spec.model, "model")
    model_d["n_variates"] = n
    model_d["groups"] = groups
    model_d["l_out"] = pred_len
    if spec.ablation == "norm_kind":
        model_d["norm_kind"] = axis_value
    elif spec.ablation == "input_length":
        model_d["l_in"] = int(axis_value)
    elif spec.ablation == "time_mode":
        model_d["time_mode"] = axis_value

    train_d = _merged(default_train_dict(spec), spec.train, "train")
    train_d["seed"] = seed
    mcfg = ModelConfig.from_dict(model_d)
    tcfg = TrainConfig(**train_d)
    tcfg.validate()

    relation = None
    if use_relation:
        raw = cos_relation_matrix(data.train.values, data.train.variate_names)
        relation = threshold_and_standardize(raw, mcfg.theta_degrees)
    return mcfg, tcfg, relation


def run_cell(spec: ExperimentSpec, data: PreparedData, axis_value, pred_len: int,
             seed: int, fmt: str | None = None) -> CellResult:
    cell = CellResult(axis_value=axis_value, pred_len=pred_len, seed=seed)
    start = time.monotonic()
    try:
        mcfg, tcfg, relation = _cell_configs(spec, data, axis_value, pred_len, seed)
        model = RTNet(mcfg, np.random.default_rng(seed), relation=relation)
        trainer = train_contrastive if (fmt or spec.format) == "contrastive" else train_end_to_end
        trainer(model, data.train, data.val, tcfg)
        cell.mse, cell.mae = evaluate(model, data.test)
    except RTNetError as exc:
        cell.status = "failed"
        cell.reason = f"{type(exc).__name__}: {exc}"
    cell.seconds = time.monotonic() - start
    return cell


def _summarize(cells: list[CellResult]) -> list[dict]:
    keys = sorted({(str(c.axis_value), c.pred_len) for c in cells},
                  key=lambda t: (t[0], t[1]))
    out = []
    for axis_value, pred_len in keys:
        ok = [c for c in cells
              if str(c.axis_value) == axis_value and c.pred_len == pred_len
              and c.status == "ok"]
        if ok:
            mses = [c.mse for c in ok]
            maes = [c.mae for c in ok]
            out.append({"axis_value": axis_value, "pred_len": pred_len,
                        "mean_mse": float(np.mean(mses)), "std_mse": float(np.std(mses)),
                        "mean_mae": float(np.mean(maes)), "std_mae": float(np.std(maes)),
                        "n_seeds": len(ok)})
        else:
            out.append({"axis_value": axis_value, "pred_len": pred_len,
                        "mean_mse": float("nan"), "std_mse": float("nan"),
                        "mean_mae": float("nan"), "std_mae": float("nan"), "n_seeds": 0})
    return out


def worker_count() -> int:
    env = os.environ.get("RTNET_WORKERS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _run_cells(jobs: list[tuple], fn) -> list:
    workers = worker_count()
    if workers == 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Train/evaluate every (ablation value, prediction length, seed) cell."""
    spec.validate()
    data = prepare_data(spec)
    values = spec.ablation_values if spec.ablation is not None else [spec.format]
    jobs = [(spec, data, v, pl, s)
            for v in values for pl in spec.pred_lengths for s in spec.seeds]
    cells = _run_cells(jobs, run_cell)
    return ExperimentReport(spec=asdict(spec), cells=cells, summary=_summarize(cells))


def compare_formats(spec: ExperimentSpec) -> ExperimentReport:
    """Paired end-to-end vs contrastive runs with identical seeds."""
    spec.validate()
    if spec.ablation is not None:
        raise ConfigError("compare_formats does not take an ablation axis")
    data = prepare_data(spec)
    jobs = [(spec, data, fmt, pl, s, fmt)
            for fmt in ("e2e", "contrastive")
            for pl in spec.pred_lengths for s in spec.seeds]
    cells = _run_cells(jobs, run_cell)
    return ExperimentReport(spec=asdict(spec), cells=cells, summary=_summarize(cells))
