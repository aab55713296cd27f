"""Command-line entry point.

Subcommands: ``ingest``, ``synth``, ``train``, ``evaluate``, ``predict`` and
``gain-trace``. Settings are resolved with the precedence

    built-in defaults < ``--config`` file < ``--set key=value`` < dedicated flags

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence. The default output directory is taken from ``DSSMCAST_OUT``
(falling back to ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import __version__
from .evaluation import ar_only_baseline, evaluate, persistence_baseline, score, write_metrics_json
from .ingest import (
    DEFAULT_ARTICLE_TYPES,
    ConfigError,
    ExoColumns,
    GridSpec,
    IngestError,
    SynthProfile,
    aggregate_hourly,
    denormalize,
    encode_metadata,
    encode_social,
    load_dataset,
    load_events,
    load_holidays,
    parse_cdr,
    prepare,
    save_dataset,
    split_boundaries,
    synth_generate,
)
from .model import CheckpointError, ModelConfig, gain_trace, load_params, predict, read_header, save_params
from .train import TrainConfig, TrainingDiverged, sweep, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
ENV_OUT = "DSSMCAST_OUT"
ABLATIONS = {"ar": "use_ar", "exo": "use_exo", "att": "use_attention"}


class CliConfigError(ValueError):
    pass


class CliDataError(ValueError):
    pass


# -- run configuration --------------------------------------------------------------
@dataclass
class RunConfig:
    """Merged model + training settings with data/output locations."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out: str | None = None


_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_RUN_KEYS = {"data", "out"}


def _coerce(key: str, raw, like):
    if isinstance(raw, str):
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise CliConfigError(f"{key}: expected a boolean, got {raw!r}")
        if isinstance(like, int):
            try:
                return int(raw)
            except ValueError:
                raise CliConfigError(f"{key}: expected an integer, got {raw!r}") from None
        if isinstance(like, float):
            try:
                return float(raw)
            except ValueError:
                raise CliConfigError(f"{key}: expected a number, got {raw!r}") from None
        return raw
    if isinstance(like, bool) and not isinstance(raw, bool):
        raise CliConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(like, float) and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    if isinstance(like, int) and not isinstance(like, bool) and not (isinstance(raw, int) and not isinstance(raw, bool)):
        raise CliConfigError(f"{key}: expected an integer, got {raw!r}")
    return raw


def read_config_file(path) -> dict:
    """Read a JSON object or ``key = value`` lines (``#`` comments allowed)."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise CliConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise CliConfigError(f"{path}: top level must be an object")
        flat = {}
        for k, v in doc.items():
            if k in ("model", "train") and isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        return flat
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise CliConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_run_config(values: dict) -> RunConfig:
    """Validate every key and build the configs; unknown keys are rejected."""
    unknown = sorted(set(values) - set(_MODEL_KEYS) - set(_TRAIN_KEYS) - _RUN_KEYS)
    if unknown:
        raise CliConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    base_m, base_t = ModelConfig(), TrainConfig()
    m = {k: _coerce(k, v, getattr(base_m, k)) for k, v in values.items() if k in _MODEL_KEYS}
    t = {k: _coerce(k, v, getattr(base_t, k)) for k, v in values.items() if k in _TRAIN_KEYS}
    try:
        return RunConfig(replace(base_m, **m), replace(base_t, **t), values.get("data"), values.get("out"))
    except (TypeError, ValueError) as exc:
        raise CliConfigError(str(exc)) from None


def default_out(sub: str) -> str:
    return os.path.join(os.environ.get(ENV_OUT, "runs"), sub)


# -- helpers --------------------------------------------------------------------------
def _load_dataset(path):
    if path is None:
        raise CliConfigError("no dataset directory given (--data)")
    try:
        return load_dataset(path)
    except (IngestError, OSError, KeyError, ValueError) as exc:
        raise CliDataError(f"cannot load dataset {path}: {exc}") from None


def _load_checkpoint(path):
    try:
        return load_params(path)
    except FileNotFoundError:
        raise CliDataError(f"checkpoint {path} not found") from None
    except CheckpointError as exc:
        raise CliDataError(str(exc)) from None


def _check_compatible(cfg: ModelConfig, ds) -> None:
    if ds.exo.values.shape[1] != cfg.d_e or ds.traffic.shape[1] != cfg.d:
        raise CliConfigError(
            f"checkpoint expects D={cfg.d}, D_e={cfg.d_e} but dataset has "
            f"D={ds.traffic.shape[1]}, D_e={ds.exo.values.shape[1]}"
        )


def _split(ds, cfg: ModelConfig, stride: int = 1):
    try:
        return ds.split(cfg.t_in, cfg.horizon, stride)
    except IngestError as exc:
        raise CliDataError(str(exc)) from None


def _summary(ds, t_in=48, horizon=24) -> dict:
    out = {
        "cells": int(ds.traffic.shape[1]),
        "hours": int(ds.hours),
        "exo_columns": int(ds.exo.values.shape[1]),
        "val_start_hour": int(ds.val_start),
        "test_start_hour": int(ds.test_start),
    }
    try:
        sp = ds.split(t_in, horizon)
        out.update(
            {"t_in": t_in, "horizon": horizon, "train_samples": len(sp.train), "val_samples": len(sp.val),
             "test_samples": len(sp.test), "dropped_samples": int(len(sp.dropped))}
        )
    except IngestError as exc:
        out["windowing"] = str(exc)
    return out


def _print(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


# -- commands ---------------------------------------------------------------------------
def cmd_ingest(args) -> int:
    schema = None
    if args.schema:
        try:
            schema = json.loads(args.schema)
        except ValueError:
            schema = read_config_file(args.schema)
        schema = {k: int(v) for k, v in schema.items()}
    try:
        grid = GridSpec(args.grid_width, args.grid_height, args.center)
    except ConfigError as exc:
        raise CliConfigError(str(exc)) from None
    records, rejected = [], 0
    for path in args.cdr:
        try:
            recs, rej = parse_cdr(path, schema, delimiter=args.delimiter)
        except ConfigError as exc:
            raise CliConfigError(str(exc)) from None
        except FileNotFoundError:
            raise CliDataError(f"{path}: no such file") from None
        records += recs
        rejected += rej
    traffic, hours = aggregate_hourly(records, grid)
    holidays = load_holidays(args.holidays) if args.holidays else set()
    blocks = [encode_metadata(hours, holidays, args.utc_offset)]
    val_start, _ = split_boundaries(len(hours), args.test_days, args.val_days)
    if args.events:
        types = tuple(args.article_types.split(",")) if args.article_types else DEFAULT_ARTICLE_TYPES
        blocks.append(encode_social(load_events(args.events), hours, grid.cells(), types, train_rows=slice(0, val_start)))
    ds = prepare(traffic, ExoColumns.hstack(blocks), args.test_days, args.val_days, int(hours[0]),
                 meta={"source": "cdr", "cells": grid.cells(), "rejected_lines": rejected})
    out = args.out or default_out("dataset")
    save_dataset(ds, out)
    doc = _summary(ds, args.t_in, args.horizon)
    doc.update({"records": len(records), "rejected_lines": rejected, "out": out})
    _print(doc)
    return EXIT_OK


def cmd_synth(args) -> int:
    prof = {}
    if args.profile:
        prof = read_config_file(args.profile)
    for key in ("noise", "events", "spatial_mixing", "weekly", "daily"):
        v = getattr(args, key)
        if v is not None:
            prof[key] = v
    base = SynthProfile()
    unknown = sorted(set(prof) - set(base.to_json()))
    if unknown:
        raise CliConfigError(f"unknown synthetic profile key(s): {', '.join(unknown)}")
    try:
        prof = {k: _coerce(k, v, getattr(base, k)) for k, v in prof.items()}
        profile = SynthProfile.from_json({**base.to_json(), **prof})
    except TypeError as exc:
        raise CliConfigError(f"bad synthetic profile: {exc}") from None
    traffic, exo = synth_generate(25, args.days, args.seed, profile)
    ds = prepare(traffic, exo, args.test_days, args.val_days, profile.start_ms,
                 meta={"source": "synth", "seed": args.seed, "days": args.days, "profile": profile.to_json()})
    out = args.out or default_out("synth")
    save_dataset(ds, out)
    doc = _summary(ds)
    doc["out"] = out
    _print(doc)
    return EXIT_OK


def _run_config_from_args(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    values.update(parse_overrides(args.set))
    for flag, key in (("variant", "variant"), ("horizon", "horizon"), ("t_in", "t_in"), ("lr", "lr"),
                      ("epochs", "max_epochs"), ("batch_size", "batch_size"), ("patience", "patience"),
                      ("d_k", "d_k"), ("d_a", "d_a"), ("channels", "channels"), ("data", "data"), ("out", "out")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    for name in getattr(args, "ablate", None) or ():
        values[ABLATIONS[name]] = False
    return build_run_config(values)


def cmd_train(args) -> int:
    rc = _run_config_from_args(args)
    ds = _load_dataset(rc.data)
    model_cfg = replace(rc.model, d_e=int(ds.exo.values.shape[1]))
    split = _split(ds, model_cfg, args.stride)
    out = rc.out or default_out("train")
    os.makedirs(out, exist_ok=True)
    if args.sweep:
        grid = json.loads(args.sweep) if args.sweep.lstrip().startswith("{") else read_config_file(args.sweep)
        res = sweep(split, model_cfg, rc.train, grid, workers=args.workers)
        with open(os.path.join(out, "sweep.json"), "w", encoding="utf-8") as fh:
            json.dump(res.table, fh, indent=2, sort_keys=True)
        if res.params is None:
            print("every sweep cell failed", file=sys.stderr)
            return EXIT_DIVERGED
        model_cfg = replace(model_cfg, **{k: v for k, v in res.best.items() if k in _MODEL_KEYS})
        params, report = res.params, res.report
    else:
        try:
            params, report = train(split, model_cfg, rc.train)
        except TrainingDiverged as exc:
            if exc.report is not None:
                exc.report.write_json(os.path.join(out, "report.json"))
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    save_params(os.path.join(out, "model.ckpt"), params, model_cfg, extra={"train": rc.train.to_json()})
    report.write_json(os.path.join(out, "report.json"))
    report.write_csv(os.path.join(out, "losses.csv"))
    _print({"best_epoch": report.best_epoch, "best_val_rmse": report.best_val_rmse, "epochs": len(report.val_rmse),
            "variant": model_cfg.variant, "notes": report.notes, "out": out})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, cfg = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    _check_compatible(cfg, ds)
    split = _split(ds, cfg)
    out = args.out or default_out("eval")
    os.makedirs(out, exist_ok=True)
    res = evaluate(params, cfg, split.test, split.stats, csv_path=os.path.join(out, "predictions.csv"))
    doc = res.to_json()
    doc["variant"] = cfg.variant
    doc["horizon"] = cfg.horizon
    if args.as_printed_corr:
        from .evaluation import corr, raw_targets

        preds = denormalize(predict(split.test.inputs, split.test.exo, params, cfg), split.stats)
        tg = raw_targets(split.test, split.stats)
        doc["corr_as_printed"] = float(np.mean([corr(tg[:, k], preds[:, k], as_printed=True) for k in range(cfg.horizon)]))
    if args.with_baselines:
        doc["baselines"] = {
            "persistence": score(split.test, persistence_baseline(split.test.inputs, cfg.horizon), split.stats).to_json()
        }
        header, _ = read_header(args.checkpoint)
        tc = TrainConfig.from_json(header.get("extra", {}).get("train", {}))
        try:
            _, _, ar = ar_only_baseline(split, tc, cfg.horizon)
            doc["baselines"]["ar_only"] = ar.to_json()
        except TrainingDiverged as exc:
            doc["baselines"]["ar_only"] = {"error": str(exc)}
    write_metrics_json(os.path.join(out, "metrics.json"), doc)
    _print({"rmse": res.rmse, "mae": res.mae, "corr": res.corr, "n": res.n, "out": out})
    return EXIT_OK


def cmd_predict(args) -> int:
    params, cfg = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    _check_compatible(cfg, ds)
    if args.latest:
        if ds.hours < cfg.t_in:
            raise CliDataError(f"dataset has {ds.hours} hours, fewer than t_in={cfg.t_in}")
        x, e = ds.traffic[-cfg.t_in:], ds.exo.values[-cfg.t_in:]
    else:
        split = _split(ds, cfg)
        n = len(split.test)
        if not 0 <= args.index < n:
            raise CliDataError(f"sample index {args.index} out of range: test split has {n} samples")
        x, e = split.test.inputs[args.index], split.test.exo[args.index]
    values = denormalize(predict(x[None], e[None], params, cfg)[0], ds.stats)
    out = args.out or os.path.join(default_out("predict"), "forecast.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon_step", "cell_id", "value_raw"])
        for k in range(cfg.horizon):
            for c in range(cfg.d):
                w.writerow([k + 1, c, repr(float(values[k, c]))])
    _print({"rows": cfg.horizon * cfg.d, "out": out})
    return EXIT_OK


def cmd_gain_trace(args) -> int:
    params, cfg = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    _check_compatible(cfg, ds)
    split = _split(ds, cfg)
    samples = getattr(split, args.split)
    trace = gain_trace(samples.inputs, samples.exo, params, cfg)
    out = args.out or os.path.join(default_out("gain"), "gain_trace.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean_gain"])
        for t, g in enumerate(trace, start=1):
            w.writerow([t, repr(float(g))])
    _print({"rows": len(trace), "out": out})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dssmcast", description="Grid cellular-traffic forecasting with attention + Kalman filtering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", help=f"output location (default: ${ENV_OUT}/<command> or ./runs/<command>)")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed")

    sp = sub.add_parser("ingest", help="parse CDR files into a prepared dataset")
    sp.add_argument("--cdr", nargs="+", required=True, help="CDR files (TSV by default)")
    sp.add_argument("--schema", help="JSON object or key=value file mapping column names to field indices")
    sp.add_argument("--delimiter", default="\t")
    sp.add_argument("--grid-width", type=int, default=100)
    sp.add_argument("--grid-height", type=int, default=100)
    sp.add_argument("--center", type=int, required=True, help="square id at the neighborhood center")
    sp.add_argument("--holidays", help="text file of ISO dates")
    sp.add_argument("--events", help="CSV of social/news events (timestamp,square_id,user_id,kind)")
    sp.add_argument("--article-types", help="comma-separated article vocabulary")
    sp.add_argument("--utc-offset", type=int, default=0, help="hours added to UTC for calendar features")
    sp.add_argument("--test-days", type=int, default=7)
    sp.add_argument("--val-days", type=int, default=2)
    sp.add_argument("--t-in", type=int, default=48, help="window length used for the printed sample counts")
    sp.add_argument("--horizon", type=int, default=24, help="horizon used for the printed sample counts")
    common(sp)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="generate a synthetic prepared dataset")
    sp.add_argument("--days", type=int, default=30)
    sp.add_argument("--profile", help="JSON or key=value file with generator settings")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--events", type=int, help="number of exogenous event spikes")
    sp.add_argument("--spatial-mixing", dest="spatial_mixing", type=float)
    sp.add_argument("--weekly", type=float)
    sp.add_argument("--daily", type=float)
    sp.add_argument("--test-days", type=int, default=7)
    sp.add_argument("--val-days", type=int, default=2)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a prepared dataset")
    sp.add_argument("--data", help="prepared dataset directory")
    sp.add_argument("--config", help="JSON or key=value run configuration")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key")
    sp.add_argument("--variant", choices=["alkf", "aekf"])
    sp.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="disable a branch (repeatable)")
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--t-in", dest="t_in", type=int)
    sp.add_argument("--d-k", dest="d_k", type=int)
    sp.add_argument("--d-a", dest="d_a", type=int)
    sp.add_argument("--channels", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--stride", type=int, default=1, help="window stride in hours")
    sp.add_argument("--sweep", help="grid as JSON object (key -> list) or file")
    sp.add_argument("--workers", type=int, default=1, help="parallel sweep workers")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--with-baselines", action="store_true", help="also score persistence and AR-only baselines")
    sp.add_argument("--as-printed-corr", action="store_true", help="also report the alternative CORR denominator")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="write one forecast as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--index", type=int, help="test-split sample index")
    g.add_argument("--latest", action="store_true", help="forecast beyond the final hour of the dataset")
    common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("gain-trace", help="export the mean Kalman gain per timestep")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"], default="test")
    common(sp)
    sp.set_defaults(func=cmd_gain_trace)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    if getattr(args, "seed", None) is None and args.command == "synth":
        args.seed = 0
    try:
        return args.func(args)
    except (CliConfigError, ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliDataError, IngestError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
