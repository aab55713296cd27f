"""Forecast metrics (RMSE, MAE, CORR), reference baselines and test-set
evaluation with CSV/JSON emission.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import DatasetSplit, NormStats, Samples, denormalize
from .model import ModelConfig, ModelParams, predict
from .ndiff import Tensor
from .train import TrainConfig, TrainReport, fit


class MetricError(ValueError):
    pass


def _pair(targets, preds) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(targets, dtype=float)
    p = np.asarray(preds, dtype=float)
    if t.shape != p.shape:
        raise MetricError(f"targets {t.shape} and predictions {p.shape} differ in shape")
    if t.size == 0:
        raise MetricError("metrics need at least one value")
    return t, p


def rmse(targets, preds) -> float:
    t, p = _pair(targets, preds)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def mae(targets, preds) -> float:
    t, p = _pair(targets, preds)
    return float(np.mean(np.abs(t - p)))


def corr(targets, preds, as_printed: bool = False, return_skipped: bool = False):
    """Mean per-sample correlation across the ``D`` cells.

    Each row is centered over its cells and the standard Pearson ratio
    ``sum(D * Dh) / sqrt(sum(D^2) * sum(Dh^2))`` is taken; rows where either
    vector has zero variance are skipped. ``as_printed=True`` instead uses
    ``sqrt(sum(D^2 * Dh^2))`` as the denominator, for comparison only (that
    ratio is not bounded by 1).

    Parameters
    ----------
    targets, preds : array_like, N x D
    as_printed : bool
    return_skipped : bool
        Also return the number of skipped rows.
    """
    t, p = _pair(targets, preds)
    if t.ndim == 1:
        t, p = t[None], p[None]
    if t.ndim != 2 or t.shape[1] < 2:
        raise MetricError(f"corr expects N x D arrays with D >= 2, got {t.shape}")
    dt = t - t.mean(axis=1, keepdims=True)
    dp = p - p.mean(axis=1, keepdims=True)
    num = (dt * dp).sum(axis=1)
    st, sp = (dt * dt).sum(axis=1), (dp * dp).sum(axis=1)
    ok = (st > 0) & (sp > 0)
    if not ok.any():
        raise MetricError("every sample has zero variance; corr is undefined")
    if as_printed:
        den = np.sqrt((dt * dt * dp * dp).sum(axis=1))
        ok &= den > 0
        if not ok.any():
            raise MetricError("every sample has a zero as-printed denominator")
    else:
        den = np.sqrt(st * sp)
    vals = num[ok] / den[ok]
    if not as_printed:
        vals = np.clip(vals, -1.0, 1.0)
    value = float(vals.mean())
    skipped = int((~ok).sum())
    return (value, skipped) if return_skipped else value


@dataclass
class EvalResult:
    rmse: float
    mae: float
    corr: float
    n: int
    corr_skipped: int = 0
    per_horizon: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_arrays(targets: np.ndarray, preds: np.ndarray) -> EvalResult:
    """Metrics over ``N x h x D`` arrays, overall and per horizon step.

    CORR is computed per horizon step on ``N x D`` slices and averaged over
    the steps where it is defined.
    """
    t, p = _pair(targets, preds)
    if t.ndim != 3:
        raise MetricError(f"expected N x h x D arrays, got {t.shape}")
    rows, corrs, skipped = [], [], 0
    for k in range(t.shape[1]):
        try:
            c, s = corr(t[:, k], p[:, k], return_skipped=True)
        except MetricError:
            c, s = float("nan"), t.shape[0]
        skipped += s
        if not math.isnan(c):
            corrs.append(c)
        rows.append({"step": k + 1, "rmse": rmse(t[:, k], p[:, k]), "mae": mae(t[:, k], p[:, k]), "corr": c})
    overall_corr = float(np.mean(corrs)) if corrs else float("nan")
    return EvalResult(rmse(t, p), mae(t, p), overall_corr, int(t.shape[0]), skipped, rows)


# -- baselines -------------------------------------------------------------------
def persistence_baseline(inputs, horizon: int) -> np.ndarray:
    """Repeat the last observed hour ``x_T`` across the horizon.

    ``inputs`` is ``T x D`` (returns ``h x D``) or ``N x T x D`` (returns ``N x h x D``).
    """
    x = np.asarray(inputs, dtype=float)
    last = x[..., -1:, :]
    return np.repeat(last, horizon, axis=-2)


@dataclass
class ArOnlyModel:
    """``((x_T W_ar + b_ar) W_out + b_out)`` reshaped to ``h x D``."""

    w_ar: Tensor
    b_ar: Tensor
    w_out: Tensor
    b_out: Tensor
    horizon: int

    @classmethod
    def init(cls, d: int, horizon: int, seed: int = 0) -> "ArOnlyModel":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d)
        return cls(
            Tensor(rng.uniform(-bound, bound, (d, d)), True),
            Tensor(np.zeros(d), True),
            Tensor(rng.uniform(-bound, bound, (d, horizon * d)), True),
            Tensor(np.zeros(horizon * d), True),
            horizon,
        )

    def tensors(self) -> dict:
        return {"w_ar": self.w_ar, "b_ar": self.b_ar, "w_out": self.w_out, "b_out": self.b_out}

    def __call__(self, inputs) -> Tensor:
        x = Tensor(np.asarray(inputs, dtype=float)[:, -1, :])
        y = (x @ self.w_ar + self.b_ar) @ self.w_out + self.b_out
        return y.reshape(x.shape[0], self.horizon, x.shape[1])


def ar_only_baseline(split: DatasetSplit, train_config: TrainConfig, horizon: int | None = None) -> tuple[ArOnlyModel, TrainReport, EvalResult]:
    """Fit the AR head plus a linear readout with the model's loss and optimizer,
    then score it on the test split."""
    horizon = horizon or split.train.horizon
    d = split.train.inputs.shape[2]
    model = ArOnlyModel.init(d, horizon, train_config.seed)
    report = fit(
        model.tensors(),
        lambda x, e: model(x),
        lambda s: model(s.inputs).data,
        split,
        train_config,
    )
    preds = model(split.test.inputs).data
    return model, report, score(split.test, preds, split.stats)


# -- evaluation of a trained model -----------------------------------------------
def raw_targets(samples: Samples, stats: NormStats | None) -> np.ndarray:
    if samples.raw_targets is not None:
        return samples.raw_targets
    return samples.targets if stats is None else denormalize(samples.targets, stats)


def score(samples: Samples, preds_norm: np.ndarray, stats: NormStats | None) -> EvalResult:
    preds = preds_norm if stats is None else denormalize(preds_norm, stats)
    return evaluate_arrays(raw_targets(samples, stats), preds)


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    test: Samples,
    stats: NormStats | None,
    csv_path=None,
    json_path=None,
    extra: dict | None = None,
) -> EvalResult:
    """Forecast every test sample, denormalize, and compute the metrics.

    Optionally writes the predictions CSV
    (``sample_id, horizon_step, cell_id, target, prediction``) and a metrics
    JSON document.
    """
    if len(test) == 0:
        raise MetricError("test split is empty")
    preds_norm = predict(test.inputs, test.exo, params, config)
    preds = preds_norm if stats is None else denormalize(preds_norm, stats)
    targets = raw_targets(test, stats)
    result = evaluate_arrays(targets, preds)
    if csv_path is not None:
        write_predictions_csv(csv_path, targets, preds)
    if json_path is not None:
        doc = result.to_json()
        if extra:
            doc.update(extra)
        write_metrics_json(json_path, doc)
    return result


def write_predictions_csv(path, targets: np.ndarray, preds: np.ndarray) -> None:
    n, h, d = targets.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "horizon_step", "cell_id", "target", "prediction"])
        for i in range(n):
            for k in range(h):
                for c in range(d):
                    w.writerow([i, k + 1, c, repr(float(targets[i, k, c])), repr(float(preds[i, k, c]))])


def read_predictions_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_predictions_csv`, returning ``N x h x D`` arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    n = 1 + max(int(r["sample_id"]) for r in rows)
    h = max(int(r["horizon_step"]) for r in rows)
    d = 1 + max(int(r["cell_id"]) for r in rows)
    t, p = np.zeros((n, h, d)), np.zeros((n, h, d))
    for r in rows:
        i, k, c = int(r["sample_id"]), int(r["horizon_step"]) - 1, int(r["cell_id"])
        t[i, k, c] = float(r["target"])
        p[i, k, c] = float(r["prediction"])
    return t, p


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def write_metrics_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
