"""Data preparation: CDR parsing, hourly aggregation, normalization,
metadata encoding, windowing, chronological splits and a synthetic
traffic generator.

All heavy arrays are float64 numpy arrays. Hours are represented as epoch
milliseconds of the hour start, or as integer hour offsets from the first
hour of a series.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

HOUR_MS = 3_600_000
DAY_HOURS = 24
WEEK_HOURS = 168
NEIGHBORHOOD = 5
CLIP_MAX = 1.5

DEFAULT_SCHEMA = {
    "square_id": 0,
    "timestamp": 1,
    "country_code": 2,
    "sms_in": 3,
    "sms_out": 4,
    "call_in": 5,
    "call_out": 6,
    "internet": 7,
}
MANDATORY_COLUMNS = ("square_id", "timestamp", "internet")
DEFAULT_ARTICLE_TYPES = ("news", "sport")


class IngestError(ValueError):
    """Raised for malformed inputs or configuration problems."""


class ConfigError(IngestError):
    """Raised when a schema or configuration is incomplete."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CdrRecord:
    square_id: int
    timestamp: int
    internet: float
    aux: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridSpec:
    """A rectangular cell grid and the 5x5 neighborhood around one cell.

    Cells are numbered ``1 .. width*height`` row-major (the Milan grid
    convention), so cell ``id`` sits at row ``(id-1) // width`` and column
    ``(id-1) % width``.
    """

    width: int
    height: int
    center_square_id: int

    def __post_init__(self):
        if self.width < NEIGHBORHOOD or self.height < NEIGHBORHOOD:
            raise ConfigError(f"grid {self.width}x{self.height} is smaller than the 5x5 neighborhood")
        r, c = self.center_rc
        half = NEIGHBORHOOD // 2
        if not (0 <= r - half and r + half < self.height and 0 <= c - half and c + half < self.width):
            raise ConfigError(
                f"5x5 neighborhood of square {self.center_square_id} leaves the {self.width}x{self.height} grid"
            )

    @property
    def center_rc(self) -> tuple[int, int]:
        i = self.center_square_id - 1
        return i // self.width, i % self.width

    def cells(self) -> list[int]:
        """The 25 neighborhood square ids in row-major order."""
        r, c = self.center_rc
        half = NEIGHBORHOOD // 2
        return [
            (rr * self.width + cc) + 1
            for rr in range(r - half, r + half + 1)
            for cc in range(c - half, c + half + 1)
        ]


@dataclass
class ExoColumns:
    """Exogenous feature block: ``values`` is hours x D_e."""

    values: np.ndarray
    names: list[str]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise IngestError(f"exogenous block shape {self.values.shape} does not match {len(self.names)} names")

    @staticmethod
    def hstack(blocks: Sequence["ExoColumns"]) -> "ExoColumns":
        return ExoColumns(np.hstack([b.values for b in blocks]), [n for b in blocks for n in b.names])


@dataclass(frozen=True)
class NormStats:
    """Per-cell min/max used by the min-max scaling."""

    min: np.ndarray
    max: np.ndarray

    def to_json(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @staticmethod
    def from_json(d: Mapping) -> "NormStats":
        return NormStats(np.asarray(d["min"], dtype=float), np.asarray(d["max"], dtype=float))


@dataclass
class Samples:
    """A stack of windowed samples.

    Attributes
    ----------
    inputs : ndarray, N x T_in x D
    exo : ndarray, N x T_in x D_e
    targets : ndarray, N x h x D
    start : ndarray of int, N
        Hour offset of each sample's first input hour.
    raw_targets : ndarray, N x h x D, optional
        Targets in original units (unclipped), used for raw-scale metrics.
    """

    inputs: np.ndarray
    exo: np.ndarray
    targets: np.ndarray
    start: np.ndarray
    raw_targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.start)

    @property
    def t_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets.shape[1]

    def target_hours(self) -> tuple[np.ndarray, np.ndarray]:
        """First and last target hour offset for every sample."""
        first = self.start + self.t_in
        return first, first + self.horizon - 1

    def subset(self, idx) -> "Samples":
        idx = np.asarray(idx, dtype=int)
        raw = None if self.raw_targets is None else self.raw_targets[idx]
        return Samples(self.inputs[idx], self.exo[idx], self.targets[idx], self.start[idx], raw)


@dataclass
class DatasetSplit:
    train: Samples
    val: Samples
    test: Samples
    stats: NormStats | None
    val_start: int
    test_start: int
    dropped: np.ndarray


# ---------------------------------------------------------------------------
# Parsing and aggregation
# ---------------------------------------------------------------------------


def _resolve_schema(schema: Mapping[str, int] | None) -> dict:
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    missing = [c for c in MANDATORY_COLUMNS if c not in schema]
    if missing:
        raise ConfigError(f"schema lacks mandatory column(s): {', '.join(missing)}")
    return schema


def _float_or_zero(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        return 0.0
    return v if np.isfinite(v) and v >= 0 else 0.0


def parse_cdr(path, schema: Mapping[str, int] | None = None, delimiter: str = "\t") -> tuple[list[CdrRecord], int]:
    """Parse a delimited CDR file.

    Parameters
    ----------
    path : path-like
        Input file.
    schema : mapping, optional
        Column name -> 0-based field index. Must name ``square_id``,
        ``timestamp`` and ``internet``. Defaults to the Milan/Trentino
        TSV layout.
    delimiter : str

    Returns
    -------
    records : list of CdrRecord
    rejected : int
        Number of non-empty lines whose mandatory fields could not be parsed.
    """
    schema = _resolve_schema(schema)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        raise IngestError(f"{path}: file is empty")
    aux_cols = {k: v for k, v in schema.items() if k not in MANDATORY_COLUMNS}
    records, rejected = [], 0
    for line in lines:
        if not line.strip():
            continue
        fields = line.split(delimiter)
        try:
            sq = int(fields[schema["square_id"]])
            ts = int(fields[schema["timestamp"]])
            raw = fields[schema["internet"]].strip()
            net = float(raw) if raw else 0.0
        except (ValueError, IndexError):
            rejected += 1
            continue
        if sq <= 0 or ts <= 0 or not np.isfinite(net) or net < 0:
            rejected += 1
            continue
        aux = {k: (_float_or_zero(fields[i]) if i < len(fields) else 0.0) for k, i in aux_cols.items()}
        records.append(CdrRecord(sq, ts, net, aux))
    return records, rejected


def aggregate_hourly(records: Sequence[CdrRecord], grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sum records into an hours x 25 matrix over the grid neighborhood.

    Returns
    -------
    traffic : ndarray, H x 25
    hours : ndarray of int64, H
        Epoch-ms start of each row; contiguous from the first to the last
        populated hour, gaps filled with zeros.
    """
    if not records:
        raise IngestError("no records to aggregate")
    col = {sq: j for j, sq in enumerate(grid.cells())}
    kept = [(r.timestamp // HOUR_MS, col[r.square_id], r.internet) for r in records if r.square_id in col]
    if not kept:
        raise IngestError(f"no record falls inside the neighborhood of square {grid.center_square_id}")
    hrs, cols, vals = (np.asarray(a) for a in zip(*kept))
    h0 = int(hrs.min())
    out = np.zeros((int(hrs.max()) - h0 + 1, len(col)))
    np.add.at(out, (hrs - h0, cols), vals.astype(float))
    return out, (np.arange(out.shape[0], dtype=np.int64) + h0) * HOUR_MS


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def minmax_normalize(matrix: np.ndarray, stats: NormStats | None = None, train_rows=None) -> tuple[np.ndarray, NormStats]:
    """Per-cell min-max scaling.

    Parameters
    ----------
    matrix : ndarray, hours x cells
    stats : NormStats, optional
        Precomputed statistics; if absent they are computed from
        ``matrix[train_rows]`` (all rows when ``train_rows`` is None).
    train_rows : slice or index array, optional

    Returns
    -------
    normalized : ndarray
        ``(x - min) / (max - min)``; constant cells map to 0. Values are
        clipped to ``[0, 1.5]`` so out-of-range evaluation rows stay bounded.
    stats : NormStats
    """
    x = np.asarray(matrix, dtype=float)
    if stats is None:
        ref = x if train_rows is None else x[train_rows]
        if ref.shape[0] == 0:
            raise IngestError("cannot compute normalization stats from zero rows")
        stats = NormStats(ref.min(axis=0), ref.max(axis=0))
    _check_stats(x, stats)
    span = stats.max - stats.min
    safe = np.where(span > 0, span, 1.0)
    y = np.where(span > 0, (x - stats.min) / safe, 0.0)
    return np.clip(y, 0.0, CLIP_MAX), stats


def denormalize(matrix: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of :func:`minmax_normalize` (constant cells map to their min)."""
    x = np.asarray(matrix, dtype=float)
    _check_stats(x, stats)
    span = stats.max - stats.min
    return x * span + stats.min


def _check_stats(x, stats):
    if x.ndim < 1 or x.shape[-1] != stats.min.shape[0] or stats.min.shape != stats.max.shape:
        raise IngestError(f"stats for {stats.min.shape[0]} cells do not match matrix of shape {x.shape}")


# ---------------------------------------------------------------------------
# Exogenous features
# ---------------------------------------------------------------------------


def encode_metadata(hours: Iterable[int], holidays: Iterable[_dt.date] = (), utc_offset_hours: int = 0) -> ExoColumns:
    """One-hot day-of-week (Monday = 0), one-hot hour-of-day and a holiday flag.

    ``hours`` are epoch milliseconds; ``utc_offset_hours`` shifts them into
    local time before calendar fields are taken.
    """
    hours = np.asarray(list(hours), dtype=np.int64)
    holidays = set(holidays)
    out = np.zeros((len(hours), 32))
    tz = _dt.timezone(_dt.timedelta(hours=utc_offset_hours))
    for i, ms in enumerate(hours):
        t = _dt.datetime.fromtimestamp(int(ms) / 1000.0, tz)
        out[i, t.weekday()] = 1.0
        out[i, 7 + t.hour] = 1.0
        out[i, 31] = float(t.date() in holidays)
    names = [f"dow_{d}" for d in range(7)] + [f"hour_{h}" for h in range(24)] + ["holiday"]
    return ExoColumns(out, names)


def load_holidays(path) -> set[_dt.date]:
    """Read a text file of ISO dates, one per line (``#`` starts a comment)."""
    out = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.add(_dt.date.fromisoformat(line))
    return out


def encode_social(
    events: Sequence[tuple[int, int, object, str]],
    hours: Sequence[int],
    cells: Sequence[int] | None = None,
    article_types: Sequence[str] = DEFAULT_ARTICLE_TYPES,
    normalize: bool = True,
    train_rows=None,
) -> ExoColumns:
    """Hourly social/news counts over the neighborhood.

    Parameters
    ----------
    events : sequence of (timestamp_ms, square_id, user_id, kind)
        ``kind == "tweet"`` counts as a tweet by ``user_id``; any other kind
        is an article of that type, with unknown types bucketed as ``other``.
    hours : sequence of int
        Epoch-ms hour starts of the output rows (contiguous).
    cells : sequence of int, optional
        Square ids to keep; all events are kept when None.
    article_types : sequence of str
        Article vocabulary; ``other`` is appended if absent.
    normalize : bool
        Apply per-column min-max scaling (stats from ``train_rows``).

    Returns
    -------
    ExoColumns with columns ``tweets, users, article_<type>...``.
    """
    vocab = list(article_types) + ([] if "other" in article_types else ["other"])
    hours = np.asarray(hours, dtype=np.int64)
    n = len(hours)
    out = np.zeros((n, 2 + len(vocab)))
    names = ["tweets", "users"] + [f"article_{v}" for v in vocab]
    if n == 0:
        return ExoColumns(out, names)
    h0 = int(hours[0]) // HOUR_MS
    keep = None if cells is None else set(cells)
    users: dict[int, set] = {}
    for ts, sq, user, kind in events:
        row = int(ts) // HOUR_MS - h0
        if not 0 <= row < n or (keep is not None and int(sq) not in keep):
            continue
        if kind == "tweet":
            out[row, 0] += 1
            users.setdefault(row, set()).add(user)
        else:
            j = vocab.index(kind) if kind in vocab else vocab.index("other")
            out[row, 2 + j] += 1
    for row, us in users.items():
        out[row, 1] = len(us)
    if normalize:
        out, _ = minmax_normalize(out, train_rows=train_rows)
    return ExoColumns(out, names)


def load_events(path) -> list[tuple[int, int, str, str]]:
    """Read social/news events from CSV with header ``timestamp,square_id,user_id,kind``."""
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["timestamp"]), int(r["square_id"]), r["user_id"], r["kind"].strip()) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# Windowing and splitting
# ---------------------------------------------------------------------------


def window_count(hours: int, t_in: int, horizon: int, stride: int = 1) -> int:
    if hours < t_in + horizon:
        return 0
    return (hours - t_in - horizon) // stride + 1


def build_windows(traffic: np.ndarray, exo: np.ndarray, t_in: int, horizon: int, stride: int = 1) -> Samples:
    """Slide a ``t_in + horizon`` window over the series.

    Sample ``i`` starts at hour ``i * stride``; the count is
    ``floor((hours - t_in - horizon) / stride) + 1``.
    """
    traffic = np.asarray(traffic, dtype=float)
    exo = np.asarray(exo, dtype=float)
    if t_in < 1 or horizon < 1 or stride < 1:
        raise IngestError("t_in, horizon and stride must be positive")
    if exo.shape[0] != traffic.shape[0]:
        raise IngestError(f"traffic has {traffic.shape[0]} hours but exogenous block has {exo.shape[0]}")
    hours = traffic.shape[0]
    if hours < t_in + horizon:
        raise IngestError(f"series of {hours} hours is too short: need at least t_in + h = {t_in + horizon}")
    n = window_count(hours, t_in, horizon, stride)
    start = np.arange(n) * stride
    idx_in = start[:, None] + np.arange(t_in)[None, :]
    idx_out = start[:, None] + t_in + np.arange(horizon)[None, :]
    return Samples(traffic[idx_in], exo[idx_in], traffic[idx_out], start)


def split_boundaries(hours: int, test_days: int = 7, val_days: int = 2) -> tuple[int, int]:
    """Hour offsets where validation and test target ranges begin."""
    test_start = hours - test_days * DAY_HOURS
    val_start = test_start - val_days * DAY_HOURS
    if val_start <= 0:
        raise IngestError(f"{hours} hours cannot hold {val_days} validation and {test_days} test days plus training")
    return val_start, test_start


def split_last_days(samples: Samples, hours: int, test_days: int = 7, val_days: int = 2, stats: NormStats | None = None) -> DatasetSplit:
    """Chronological train/validation/test split by target hours.

    Test samples have every target hour within the final ``test_days``
    days; validation targets lie within the ``val_days`` days before that;
    training targets end before validation starts. Samples whose targets
    straddle a boundary belong to no split and are reported in ``dropped``
    so target hours never overlap across splits.
    """
    if val_days <= 0:
        raise IngestError("val_days must be positive: the validation split would be empty")
    val_start, test_start = split_boundaries(hours, test_days, val_days)
    first, last = samples.target_hours()
    test = first >= test_start
    val = (first >= val_start) & (last < test_start)
    train = last < val_start
    dropped = np.flatnonzero(~(test | val | train))
    parts = {}
    for name, mask in (("train", train), ("val", val), ("test", test)):
        if not mask.any():
            raise IngestError(f"{name} split is empty")
        parts[name] = samples.subset(np.flatnonzero(mask))
    return DatasetSplit(parts["train"], parts["val"], parts["test"], stats, val_start, test_start, dropped)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthProfile:
    """Knobs for :func:`synth_generate`.

    ``noise`` scales both the i.i.d. observation noise and the innovations
    of the spatially mixed latent field, so ``noise=0`` together with
    ``weekly=0`` yields a series that repeats every 24 hours.
    """

    base: float = 1.0
    daily: float = 0.6
    weekly: float = 0.15
    spatial_mixing: float = 1.0
    spatial_length: float = 1.2
    latent_ar: float = 0.9
    noise: float = 0.05
    events: int = 0
    event_cell: int = 12
    event_magnitude: float = 3.0
    event_duration: int = 2
    event_lead: int = 2
    start_ms: int = 1_383_260_400_000  # 2013-11-01 00:00 UTC
    article_types: tuple = DEFAULT_ARTICLE_TYPES

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["article_types"] = list(self.article_types)
        return d

    @staticmethod
    def from_json(d: Mapping) -> "SynthProfile":
        d = dict(d)
        if "article_types" in d:
            d["article_types"] = tuple(d["article_types"])
        return SynthProfile(**d)


def _cell_rc(n_cells: int) -> np.ndarray:
    side = int(round(np.sqrt(n_cells)))
    if side * side != n_cells:
        raise IngestError(f"{n_cells} cells do not form a square grid")
    return np.array([(i // side, i % side) for i in range(n_cells)], dtype=float)


def synth_generate(cells: int = 25, days: int = 30, seed: int = 0, profile: SynthProfile | None = None) -> tuple[np.ndarray, ExoColumns]:
    """Seeded synthetic hourly traffic over a square grid plus exogenous columns.

    Each cell is ``base_c + daily sinusoid + weekly modulation + mixed latent
    field + noise``, clipped at zero. The latent field is an AR(1) process
    per cell, mixed with weights ``exp(-distance / spatial_length)`` so
    adjacent cells are more correlated than distant ones. Optional event
    spikes raise traffic around ``event_cell`` for ``event_duration`` hours
    and lift the tweet column starting ``event_lead`` hours earlier.

    Returns
    -------
    traffic : ndarray, (24*days) x cells, raw (unnormalized) volumes
    exo : ExoColumns
        32 calendar columns followed by normalized social columns.
    """
    if days < 3:
        raise IngestError("synthetic data needs at least 3 days")
    p = profile or SynthProfile()
    rng = np.random.default_rng(seed)
    H = days * DAY_HOURS
    rc = _cell_rc(cells)
    t = np.arange(H, dtype=float)

    level = p.base * rng.uniform(0.5, 1.5, cells)
    amp = p.daily * rng.uniform(0.7, 1.3, cells)
    phase = rng.uniform(-0.5, 0.5, cells)
    daily = amp[None, :] * np.sin(2 * np.pi * ((t[:, None] % DAY_HOURS) / DAY_HOURS) + phase[None, :])
    day_idx = (t // DAY_HOURS).astype(int)
    weekly = p.weekly * level[None, :] * np.where((day_idx % 7) >= 5, -1.0, 0.4)[:, None]

    dist = np.linalg.norm(rc[:, None, :] - rc[None, :, :], axis=-1)
    mix = np.exp(-dist / p.spatial_length)
    mix /= mix.sum(axis=1, keepdims=True)
    innov = rng.normal(size=(H, cells)) * p.noise * 3.0
    latent = np.zeros((H, cells))
    for i in range(1, H):
        latent[i] = p.latent_ar * latent[i - 1] + innov[i]
    spatial = p.spatial_mixing * latent @ mix.T

    noise = rng.normal(size=(H, cells)) * p.noise
    traffic = level[None, :] + daily + weekly + spatial + noise

    hours_ms = p.start_ms + np.arange(H, dtype=np.int64) * HOUR_MS
    events = []
    if p.events > 0:
        span = max(H - p.event_duration - 1, p.event_lead + 1)
        onsets = np.sort(rng.choice(np.arange(p.event_lead + 1, span), size=min(p.events, span - p.event_lead - 1), replace=False))
        bump = np.exp(-dist[p.event_cell] / 0.8)
        for on in onsets:
            traffic[on : on + p.event_duration] += p.event_magnitude * bump[None, :]
            for hr in range(on - p.event_lead, min(on + p.event_duration, H)):
                for k in range(8):
                    events.append((int(hours_ms[hr]), p.event_cell + 1, f"u{on}_{k % 5}", "tweet"))
    # background chatter: a few tweets per hour, deterministic per seed
    chatter = rng.poisson(1.0, H)
    for hr in np.flatnonzero(chatter):
        for k in range(chatter[hr]):
            events.append((int(hours_ms[hr]), int(rng.integers(1, cells + 1)), f"b{k}", "tweet"))

    traffic = np.maximum(traffic, 0.0)
    meta = encode_metadata(hours_ms)
    social = encode_social(events, hours_ms, article_types=p.article_types)
    return traffic, ExoColumns.hstack([meta, social])


# ---------------------------------------------------------------------------
# Prepared dataset directory
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


@dataclass
class PreparedDataset:
    """Series-level prepared data; windows are cut at training time."""

    traffic: np.ndarray          # hours x D, normalized
    raw: np.ndarray              # hours x D, original units
    exo: ExoColumns
    stats: NormStats
    val_start: int
    test_start: int
    start_ms: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def hours(self) -> int:
        return self.traffic.shape[0]

    def windows(self, t_in: int, horizon: int, stride: int = 1) -> Samples:
        s = build_windows(self.traffic, self.exo.values, t_in, horizon, stride)
        idx_out = s.start[:, None] + t_in + np.arange(horizon)[None, :]
        s.raw_targets = self.raw[idx_out]
        return s

    def split(self, t_in: int, horizon: int, stride: int = 1) -> DatasetSplit:
        s = self.windows(t_in, horizon, stride)
        test_days = (self.hours - self.test_start) // DAY_HOURS
        val_days = (self.test_start - self.val_start) // DAY_HOURS
        return split_last_days(s, self.hours, test_days, val_days, self.stats)


def prepare(raw: np.ndarray, exo: ExoColumns, test_days: int = 7, val_days: int = 2, start_ms: int = 0, meta=None) -> PreparedDataset:
    """Normalize with training-range stats and record split boundaries."""
    raw = np.asarray(raw, dtype=float)
    val_start, test_start = split_boundaries(raw.shape[0], test_days, val_days)
    norm, stats = minmax_normalize(raw, train_rows=slice(0, val_start))
    return PreparedDataset(norm, raw, exo, stats, val_start, test_start, start_ms, dict(meta or {}))


def _write_f64(path, arr):
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)


def _read_f64(path, shape):
    data = np.fromfile(path, dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise IngestError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape).astype(float)


def save_dataset(ds: PreparedDataset, directory) -> None:
    """Write ``manifest.json`` plus little-endian float64 arrays."""
    os.makedirs(directory, exist_ok=True)
    _write_f64(os.path.join(directory, "traffic.f64"), ds.traffic)
    _write_f64(os.path.join(directory, "raw.f64"), ds.raw)
    _write_f64(os.path.join(directory, "exo.f64"), ds.exo.values)
    manifest = {
        "format": 1,
        "hours": ds.hours,
        "cells": ds.traffic.shape[1],
        "exo_columns": ds.exo.names,
        "stats": ds.stats.to_json(),
        "val_start": ds.val_start,
        "test_start": ds.test_start,
        "start_ms": int(ds.start_ms),
        "arrays": {"traffic": "traffic.f64", "raw": "raw.f64", "exo": "exo.f64"},
        "meta": ds.meta,
    }
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(directory) -> PreparedDataset:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise IngestError(f"{directory}: no {MANIFEST}")
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    H, D, names = m["hours"], m["cells"], m["exo_columns"]
    arr = m["arrays"]
    traffic = _read_f64(os.path.join(directory, arr["traffic"]), (H, D))
    raw = _read_f64(os.path.join(directory, arr["raw"]), (H, D))
    exo = _read_f64(os.path.join(directory, arr["exo"]), (H, len(names)))
    return PreparedDataset(
        traffic, raw, ExoColumns(exo, list(names)), NormStats.from_json(m["stats"]),
        m["val_start"], m["test_start"], m.get("start_ms", 0), m.get("meta", {}),
    )
