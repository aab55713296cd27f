"""RMSE training with Adam, validation-based early stopping and a small
grid sweep.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping

import numpy as np

from .ingest import DatasetSplit, NormStats, Samples, denormalize
from .model import ModelConfig, ModelParams, forward, init_params, predict
from .ndiff import Tensor, from_op

MS_GUARD = 1e-24


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; ``report`` holds the epochs completed so far."""

    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    train_rmse: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse: float = float("inf")
    wall_time: float = 0.0
    floor_events: int = 0
    steps: int = 0
    stopped_early: bool = False
    diverged: bool = False
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_rmse", "val_rmse"])
            for i, (tr, va) in enumerate(zip(self.train_rmse, self.val_rmse), start=1):
                w.writerow([i, repr(float(tr)), repr(float(va))])


# -- loss and optimizer --------------------------------------------------------
def rmse_loss(pred: Tensor, target) -> Tensor:
    """Root of the mean squared error over every entry.

    Below a mean square of 1e-24 the gradient is reported as zero rather than
    the ill-defined ``1/sqrt(0)``.
    """
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=float)
    if pred.shape != target_data.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target_data.shape}")
    diff = pred.data - target_data
    ms = float(np.mean(diff * diff))
    value = np.sqrt(ms)
    n = diff.size

    def backward(g):
        if ms < MS_GUARD:
            return (np.zeros_like(diff),)
        return (g * diff / (n * value),)

    return from_op(np.array(value), (pred,), backward, "rmse")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, t: int, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Raises ``FloatingPointError`` before touching anything if a gradient is
    not finite.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    state.t = t
    return state


# -- generic fitting loop --------------------------------------------------------
PredictFn = Callable[[np.ndarray, np.ndarray], Tensor]


def raw_rmse(preds: np.ndarray, samples: Samples, stats: NormStats | None) -> float:
    """RMSE in original units (falls back to normalized units without stats)."""
    if stats is None:
        target = samples.targets
        out = preds
    else:
        target = samples.raw_targets if samples.raw_targets is not None else denormalize(samples.targets, stats)
        out = denormalize(preds, stats)
    return float(np.sqrt(np.mean((out - target) ** 2)))


def batch_order(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool) -> list[np.ndarray]:
    """Contiguous chronological batches, visited in a seeded random order."""
    batches = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if shuffle:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def fit(
    tensors: Mapping[str, Tensor],
    predict_fn: PredictFn,
    evaluate_fn: Callable[[Samples], np.ndarray],
    split: DatasetSplit,
    config: TrainConfig,
    on_batch: Callable[[], int] | None = None,
) -> TrainReport:
    """Mini-batch Adam on RMSE with early stopping on raw-unit validation RMSE.

    On return ``tensors`` hold the best-epoch values.
    """
    if len(split.train) == 0 or len(split.val) == 0:
        raise ValueError("training needs nonempty train and validation splits")
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(tensors)
    report = TrainReport()
    best = {k: p.data.copy() for k, p in tensors.items()}
    started = time.perf_counter()
    since_best = 0
    step = 0
    tr = split.train
    for epoch in range(1, config.max_epochs + 1):
        losses, weights = [], []
        for idx in batch_order(len(tr), config.batch_size, rng, config.shuffle):
            for p in tensors.values():
                p.zero_grad()
            loss = rmse_loss(predict_fn(tr.inputs[idx], tr.exo[idx]), tr.targets[idx])
            if not np.isfinite(loss.item()):
                report.diverged = True
                report.wall_time = time.perf_counter() - started
                _restore(tensors, best)
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", report)
            loss.backward()
            step += 1
            try:
                adam_step(tensors, {k: p.grad for k, p in tensors.items()}, state, step, config)
            except FloatingPointError as exc:
                report.diverged = True
                report.wall_time = time.perf_counter() - started
                _restore(tensors, best)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", report) from None
            if on_batch is not None:
                report.floor_events += on_batch()
            losses.append(loss.item())
            weights.append(len(idx))
        report.train_rmse.append(float(np.average(losses, weights=weights)))
        val = raw_rmse(evaluate_fn(split.val), split.val, split.stats)
        if not np.isfinite(val):
            report.diverged = True
            report.wall_time = time.perf_counter() - started
            _restore(tensors, best)
            raise TrainingDiverged(f"non-finite validation RMSE at epoch {epoch}", report)
        report.val_rmse.append(val)
        if val < report.best_val_rmse:
            report.best_val_rmse, report.best_epoch = val, epoch
            best = {k: p.data.copy() for k, p in tensors.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = epoch < config.max_epochs
                break
    report.steps = step
    report.wall_time = time.perf_counter() - started
    _restore(tensors, best)
    return report


def _restore(tensors, snapshot):
    for k, p in tensors.items():
        p.data[...] = snapshot[k]


# -- model training --------------------------------------------------------------
def train(
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Train the forecaster and return the best-validation parameters."""
    params = params if params is not None else init_params(model_config, train_config.seed)
    named = params.named_tensors()
    floors = [0]

    def predict_fn(x, e):
        f = forward(x, e, params, model_config)
        floors[0] = f.floor_events
        return f.values

    def evaluate_fn(s: Samples):
        return predict(s.inputs, s.exo, params, model_config)

    def on_batch():
        return floors[0]

    report = fit(named, predict_fn, evaluate_fn, split, train_config, on_batch)
    for flag, label in (("use_ar", "ar"), ("use_exo", "exo"), ("use_attention", "attention")):
        if not getattr(model_config, flag):
            report.notes.append(f"branch disabled: {label}")
    return params, report


# -- sweep -------------------------------------------------------------------------
@dataclass
class SweepResult:
    best: dict
    params: ModelParams | None
    report: TrainReport | None
    table: list


def _split_overrides(cell: Mapping) -> tuple[dict, dict]:
    mfields = {f.name for f in fields(ModelConfig)}
    tfields = {f.name for f in fields(TrainConfig)}
    m, t = {}, {}
    for k, v in cell.items():
        if k in mfields:
            m[k] = v
        elif k in tfields:
            t[k] = v
        else:
            raise ValueError(f"unknown sweep key {k!r}")
    return m, t


def _run_cell(args):
    split, model_config, train_config, cell = args
    m, t = _split_overrides(cell)
    try:
        params, report = train(split, replace(model_config, **m), replace(train_config, **t))
        return cell, params, report, None
    except (TrainingDiverged, ValueError, FloatingPointError) as exc:
        return cell, None, getattr(exc, "report", None), str(exc)


def sweep(split: DatasetSplit, model_config: ModelConfig, train_config: TrainConfig, grid: Mapping[str, list], workers: int = 1) -> SweepResult:
    """Exhaustive grid over model/train hyperparameters, selected by validation RMSE.

    Every cell uses ``train_config.seed``. Failing cells are recorded in the
    table with their error and never selected.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must be nonempty")
    keys = list(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    for c in cells:
        _split_overrides(c)
    jobs = [(split, model_config, train_config, c) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    table = []
    best_i = None
    for i, (cell, params, report, err) in enumerate(results):
        val = report.best_val_rmse if (report is not None and err is None) else None
        table.append({"hparams": cell, "best_val_rmse": val, "error": err})
        if val is not None and (best_i is None or val < table[best_i]["best_val_rmse"]):
            best_i = i
    if best_i is None:
        return SweepResult({}, None, None, table)
    cell, params, report, _ = results[best_i]
    return SweepResult(cell, params, report, table)
