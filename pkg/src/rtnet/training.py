"""Training loops, losses, augmentation, and the overlap-limited batch sampler.

End-to-end training backpropagates the sum of per-variate MSE losses; with
grouped layers this is gradient-identical to backpropagating each variate's
loss through its own group.  Contrastive training runs in two stages: the
pyramid learns window representations against an overlap-limited minibatch,
then the pyramid is frozen and only the projection heads fit the targets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeriesDataset, gather_batch, make_windows
from .errors import ConfigError, ContractError, NumericalError, SamplerError
from .model import RTNet
from .optim import Adam
from .tensor import (GradTape, Tensor, abs_op, add, add_scalar, backward, exp_op,
                     log_op, matmul_t, mse_per_variate, mul_const, mul_scalar,
                     normalize_rows, sub, sum_axis, take_axis1, take_rows)

AUGMENT_KINDS = ("scaling", "jittering", "entirety_scaling")


@dataclass
class AugmentSpec:
    kind: str
    beta: float = 0.2
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ConfigError(f"augmentation kind must be one of {AUGMENT_KINDS}, got {self.kind!r}")
        if self.beta < 0.0:
            raise ConfigError(f"augmentation beta must be >= 0, got {self.beta}")


def augment(window: np.ndarray, spec: AugmentSpec,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Perturb one input window; every drawn amplitude lies in [-beta, beta]."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    window = np.asarray(window, dtype=np.float64)
    if spec.kind == "scaling":
        return window * (1.0 + rng.uniform(-spec.beta, spec.beta, window.shape))
    if spec.kind == "jittering":
        return window + rng.uniform(-spec.beta, spec.beta, window.shape)
    return window * (1.0 + rng.uniform(-spec.beta, spec.beta))


def mse_loss_vector(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Per-variate mean squared error, length N; backward uses the entry sum."""
    return mse_per_variate(pred, truth)


def max_condition1_batch(n_rows: int, l_in: int, alpha: float) -> tuple[int, int]:
    """(max feasible batch, minimum offset gap) for the overlap bound L_in(1 - 1/alpha)."""
    if alpha < 1.0:
        raise ConfigError(f"alpha must be >= 1, got {alpha}")
    n_offsets = n_rows - l_in + 1
    if n_offsets < 1:
        raise SamplerError(f"series of {n_rows} rows cannot host a window of {l_in}")
    min_gap = math.ceil(l_in / alpha)
    return (n_offsets - 1) // min_gap + 1, min_gap


def sample_batch_condition1(dataset, batch: int, l_in: int, alpha: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Draw ``batch`` window offsets whose pairwise overlaps satisfy the bound.

    Rejection-samples random offset sets, then falls back to a deterministic
    evenly spaced sweep with a random start.
    """
    n_rows = len(dataset) if not isinstance(dataset, int) else dataset
    feasible, min_gap = max_condition1_batch(n_rows, l_in, alpha)
    if batch > feasible:
        raise SamplerError(f"batch {batch} infeasible: at most {feasible} windows of "
                           f"length {l_in} fit {n_rows} rows at alpha={alpha}")
    n_offsets = n_rows - l_in + 1
    for _ in range(64):
        cand = np.sort(rng.choice(n_offsets, size=batch, replace=False))
        if batch == 1 or np.diff(cand).min() >= min_gap:
            return cand
    slack = (n_offsets - 1) - (batch - 1) * min_gap
    start = int(rng.integers(0, slack + 1)) if slack > 0 else 0
    gap = (n_offsets - 1 - start) // (batch - 1) if batch > 1 else 1
    return start + gap * np.arange(batch)


def check_condition1(offsets: np.ndarray, l_in: int, alpha: float) -> bool:
    """True when every pairwise overlap is <= L_in - L_in/alpha."""
    off = np.sort(np.asarray(offsets))
    if off.size < 2:
        return True
    overlap = np.maximum(0, l_in - np.diff(off))
    return bool(np.all(overlap <= l_in - l_in / alpha + 1e-9))


@dataclass
class ContrastiveBatch:
    """Original windows followed by their augmented instances.

    Instance layout along axis 0: the B originals first, then instance i of
    window m at index B + m*I + i.
    """

    windows: np.ndarray          # ((1+I)*B, L_in, N)
    offsets: np.ndarray          # (B,)
    n_windows: int
    n_augments: int

    @property
    def total_instances(self) -> int:
        return (1 + self.n_augments) * self.n_windows

    def augment_mask(self) -> np.ndarray:
        """(B, total) 0/1 matrix marking each window's augmented instances."""
        b, i = self.n_windows, self.n_augments
        mask = np.zeros((b, self.total_instances))
        for m in range(b):
            mask[m, b + m * i: b + (m + 1) * i] = 1.0
        return mask


def make_contrastive_batch(ds: TimeSeriesDataset, batch: int, l_in: int, alpha: float,
                           n_augments: int, beta: float,
                           rng: np.random.Generator) -> ContrastiveBatch:
    offsets = sample_batch_condition1(len(ds), batch, l_in, alpha, rng)
    originals = np.stack([ds.values[o:o + l_in] for o in offsets])
    pieces = [originals]
    for m in range(batch):
        for _ in range(n_augments):
            kind = AUGMENT_KINDS[rng.integers(0, len(AUGMENT_KINDS))]
            pieces.append(augment(originals[m], AugmentSpec(kind, beta), rng)[None])
    return ContrastiveBatch(np.concatenate(pieces, axis=0), offsets, batch, n_augments)


def contrastive_loss(reps: Tensor, n_windows: int, n_augments: int
                     ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Similarity-ratio loss over (total, groups, features) representations.

    Returns (scalar total for backward, per-variate means, per-window losses).
    For window m: -log[(e + sum_i sim(h_m, h_mi)) / sum over all instances of
    sim(h_m, .)], with sim(u, v) = exp(|u.v| / (|u||v|)); the literal constant
    e stands in for the self-similarity sim(h_m, h_m).
    """
    total_inst, groups, _ = reps.data.shape
    if total_inst != (1 + n_augments) * n_windows:
        raise ConfigError(f"{total_inst} instances != (1+{n_augments})*{n_windows}")
    mask = np.zeros((n_windows, total_inst))
    for m in range(n_windows):
        mask[m, n_windows + m * n_augments: n_windows + (m + 1) * n_augments] = 1.0

    total: Tensor | None = None
    per_variate = np.empty(groups)
    per_window = np.empty((groups, n_windows))
    for g in range(groups):
        h = normalize_rows(take_axis1(reps, g))
        sims = exp_op(abs_op(matmul_t(h, h)))
        rows = take_rows(sims, 0, n_windows)
        den = sum_axis(rows, 1)
        num = add_scalar(sum_axis(mul_const(rows, mask), 1), float(np.e))
        loss_m = sub(log_op(den), log_op(num))
        loss_g = mul_scalar(sum_axis(loss_m), 1.0 / n_windows)
        per_window[g] = loss_m.data
        per_variate[g] = loss_g.item()
        total = loss_g if total is None else add(total, loss_g)
    return total, per_variate, per_window


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    stage1_batch_size: int = 64
    stage2_batch_size: int = 16
    lr: float = 1e-4
    patience: int = 3
    alpha: float = 4.0
    n_augments: int = 3
    beta: float = 0.2
    seed: int = 0
    max_steps_per_epoch: int | None = None
    stage1_epochs: int | None = None

    def validate(self) -> None:
        if self.alpha < 1.0:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


def early_stop(history: list[float], patience: int) -> tuple[bool, int]:
    """Stop once the best value is ``patience`` evaluations old; ties don't improve."""
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    if not history:
        return False, -1
    best = int(np.argmin(history))  # first occurrence: a tie is no improvement
    return (len(history) - 1 - best) >= patience, best


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")

    def write_history_csv(self, path: str) -> None:
        if not self.history:
            return
        keys: list[str] = []
        for row in self.history:
            keys.extend(k for k in row if k not in keys)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in self.history:
                w.writerow([row.get(k, "") for k in keys])


def _history_row(epoch: int, per_variate_loss: np.ndarray, val_mse: float,
                 val_mae: float, stage: int | None = None) -> dict:
    row: dict = {"epoch": epoch}
    if stage is not None:
        row["stage"] = stage
    for i, v in enumerate(np.atleast_1d(per_variate_loss)):
        row[f"train_loss_{i}"] = float(v)
    row["val_mse"] = val_mse
    row["val_mae"] = val_mae
    return row


def _snapshot(model: RTNet) -> dict[str, np.ndarray]:
    state = {n: p.data.copy() for n, p in model.named_parameters()}
    state.update({"buffer:" + n: b.copy() for n, b in model.named_buffers()})
    return state


def _restore(model: RTNet, state: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        p.data = state[n].copy()
    for n, b in model.named_buffers():
        b[...] = state["buffer:" + n]


def evaluate(model: RTNet, ds: TimeSeriesDataset, batch_size: int = 64) -> tuple[float, float]:
    """Mean squared / absolute error over every window of a split (eval mode)."""
    cfg = model.cfg
    offsets = make_windows(len(ds), cfg.l_in, cfg.l_out)
    se = 0.0
    ae = 0.0
    count = 0
    for start in range(0, offsets.size, batch_size):
        chunk = offsets[start:start + batch_size]
        wb = gather_batch(ds, chunk, cfg.l_in, cfg.l_out,
                          with_marks=cfg.time_mode == "decoupled",
                          with_input_marks=cfg.time_mode == "input")
        pred = model.forward(wb.inputs, wb.time_marks, training=False,
                             input_marks=wb.input_marks)
        diff = pred.data - wb.targets
        se += float((diff ** 2).sum())
        ae += float(np.abs(diff).sum())
        count += diff.size
    return se / count, ae / count


def _epoch_batches(n_windows: int, batch_size: int, rng: np.random.Generator,
                   max_steps: int | None):
    steps = n_windows // batch_size
    if steps < 1:
        raise ConfigError(f"batch size {batch_size} exceeds the {n_windows} "
                          "available training windows")
    order = rng.permutation(n_windows)
    if max_steps is not None:
        steps = min(steps, max_steps)
    for s in range(steps):
        yield order[s * batch_size:(s + 1) * batch_size]


def train_end_to_end(model: RTNet, train_ds: TimeSeriesDataset, val_ds: TimeSeriesDataset,
                     cfg: TrainConfig) -> TrainResult:
    """Single-stage supervised training with per-variate MSE and early stopping."""
    cfg.validate()
    mcfg = model.cfg
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    offsets = make_windows(len(train_ds), mcfg.l_in, mcfg.l_out)
    opt = Adam(list(model.named_parameters()), lr=cfg.lr)
    result = TrainResult()
    best_state = _snapshot(model)
    val_history: list[float] = []

    for epoch in range(cfg.epochs):
        epoch_loss = np.zeros(mcfg.n_variates)
        steps = 0
        for batch_idx in _epoch_batches(offsets.size, cfg.batch_size, shuffle_rng,
                                        cfg.max_steps_per_epoch):
            wb = gather_batch(train_ds, offsets[batch_idx], mcfg.l_in, mcfg.l_out,
                              with_marks=mcfg.time_mode == "decoupled",
                              with_input_marks=mcfg.time_mode == "input")
            with GradTape() as tape:
                pred = model.forward(wb.inputs, wb.time_marks, training=True,
                                     rng=drop_rng, input_marks=wb.input_marks)
                loss_vec = mse_loss_vector(pred, wb.targets)
                total = sum_axis(loss_vec)
            if not np.isfinite(total.item()):
                raise NumericalError(f"training diverged: non-finite loss at "
                                     f"epoch {epoch}, step {steps}")
            opt.zero_grad()
            backward(tape, total, params=opt.params)
            opt.step()
            epoch_loss += loss_vec.data
            steps += 1

        val_mse, val_mae = evaluate(model, val_ds)
        val_history.append(val_mse)
        result.history.append(_history_row(epoch, epoch_loss / max(steps, 1),
                                           val_mse, val_mae))
        stop, best = early_stop(val_history, cfg.patience)
        if best == len(val_history) - 1:
            best_state = _snapshot(model)
            result.best_epoch = epoch
            result.best_val_mse = val_mse
        if stop:
            break

    _restore(model, best_state)
    return result


def _stage1_loss(model: RTNet, batch: ContrastiveBatch, training: bool,
                 rng: np.random.Generator | None):
    reps = model.representations(batch.windows, training=training, rng=rng)
    return contrastive_loss(reps, batch.n_windows, batch.n_augments)


def train_contrastive(model: RTNet, train_ds: TimeSeriesDataset, val_ds: TimeSeriesDataset,
                      cfg: TrainConfig) -> TrainResult:
    """Two stages: representation learning on the pyramid, then frozen-backbone heads."""
    cfg.validate()
    mcfg = model.cfg
    if mcfg.time_mode == "input":
        raise ConfigError("contrastive training expects decoupled or absent time features")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    sample_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    shuffle_rng = np.random.default_rng(seeds[2])
    val_rng = np.random.default_rng(seeds[3])

    stage1_epochs = cfg.stage1_epochs if cfg.stage1_epochs is not None else cfg.epochs
    n_windows = make_windows(len(train_ds), mcfg.l_in, mcfg.l_out).size
    steps_per_epoch = max(1, n_windows // cfg.stage1_batch_size)
    if cfg.max_steps_per_epoch is not None:
        steps_per_epoch = min(steps_per_epoch, cfg.max_steps_per_epoch)

    feasible, _ = max_condition1_batch(len(val_ds), mcfg.l_in, cfg.alpha)
    val_batch = make_contrastive_batch(val_ds, min(cfg.stage1_batch_size, feasible),
                                       mcfg.l_in, cfg.alpha, cfg.n_augments,
                                       cfg.beta, val_rng)

    opt1 = Adam(list(model.cpn_named_parameters()), lr=cfg.lr)
    result = TrainResult()
    best_state = _snapshot(model)
    val_history: list[float] = []
    for epoch in range(stage1_epochs):
        epoch_group_loss = np.zeros(mcfg.groups)
        for step in range(steps_per_epoch):
            batch = make_contrastive_batch(train_ds, cfg.stage1_batch_size, mcfg.l_in,
                                           cfg.alpha, cfg.n_augments, cfg.beta, sample_rng)
            with GradTape() as tape:
                total, per_var, _ = _stage1_loss(model, batch, True, drop_rng)
            if not np.isfinite(total.item()):
                raise NumericalError(f"stage 1 diverged: non-finite loss at "
                                     f"epoch {epoch}, step {step}")
            opt1.zero_grad()
            backward(tape, total, params=opt1.params)
            opt1.step()
            epoch_group_loss += per_var

        val_total, _, _ = _stage1_loss(model, val_batch, False, None)
        val_loss = val_total.item() / model.cfg.groups
        val_history.append(val_loss)
        result.history.append(_history_row(epoch, epoch_group_loss / steps_per_epoch,
                                           val_loss, float("nan"), stage=1))
        stop, best = early_stop(val_history, cfg.patience)
        if best == len(val_history) - 1:
            best_state = _snapshot(model)
        if stop:
            break
    _restore(model, best_state)

    model.freeze_cpn()
    for _, p in model.cpn_named_parameters():
        if p.requires_grad:
            raise ContractError("stage-1 parameters must be frozen before stage 2")

    head_params = list(model.head_named_parameters())
    opt2 = Adam(head_params, lr=cfg.lr)
    offsets = make_windows(len(train_ds), mcfg.l_in, mcfg.l_out)
    best_state = _snapshot(model)
    stage2_val: list[float] = []
    for epoch in range(cfg.epochs):
        epoch_loss = np.zeros(mcfg.n_variates)
        steps = 0
        for batch_idx in _epoch_batches(offsets.size, cfg.stage2_batch_size, shuffle_rng,
                                        cfg.max_steps_per_epoch):
            wb = gather_batch(train_ds, offsets[batch_idx], mcfg.l_in, mcfg.l_out,
                              with_marks=mcfg.time_mode == "decoupled")
            with GradTape() as tape:
                pred = model.forward(wb.inputs, wb.time_marks, training=True,
                                     rng=drop_rng, detach_features=True)
                loss_vec = mse_loss_vector(pred, wb.targets)
                total = sum_axis(loss_vec)
            if not np.isfinite(total.item()):
                raise NumericalError(f"stage 2 diverged: non-finite loss at "
                                     f"epoch {epoch}, step {steps}")
            opt2.zero_grad()
            backward(tape, total, params=opt2.params)
            opt2.step()
            epoch_loss += loss_vec.data
            steps += 1

        val_mse, val_mae = evaluate(model, val_ds)
        stage2_val.append(val_mse)
        result.history.append(_history_row(epoch, epoch_loss / max(steps, 1),
                                           val_mse, val_mae, stage=2))
        stop, best = early_stop(stage2_val, cfg.patience)
        if best == len(stage2_val) - 1:
            best_state = _snapshot(model)
            result.best_epoch = epoch
            result.best_val_mse = val_mse
        if stop:
            break
    _restore(model, best_state)
    return result
