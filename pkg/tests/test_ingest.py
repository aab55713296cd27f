import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dssmcast.ingest import (
    HOUR_MS,
    CdrRecord,
    ConfigError,
    ExoColumns,
    GridSpec,
    IngestError,
    NormStats,
    SynthProfile,
    aggregate_hourly,
    build_windows,
    denormalize,
    encode_metadata,
    encode_social,
    load_dataset,
    load_holidays,
    minmax_normalize,
    parse_cdr,
    prepare,
    save_dataset,
    split_last_days,
    synth_generate,
    window_count,
)

T0 = 1383260400000  # 2013-11-01 00:00 UTC


@pytest.fixture
def grid():
    return GridSpec(width=10, height=10, center_square_id=45)


class TestParse:
    def test_default_schema_line(self, tmp_path):
        p = tmp_path / "a.tsv"
        p.write_text("5060\t1383260400000\t\t\t\t\t\t12.5\n")
        recs, rej = parse_cdr(p)
        assert rej == 0
        assert recs[0].square_id == 5060 and recs[0].timestamp == 1383260400000
        assert recs[0].internet == 12.5
        assert all(v == 0.0 for v in recs[0].aux.values())

    def test_rejects_and_counts(self, tmp_path):
        p = tmp_path / "a.tsv"
        p.write_text("abc\t1383260400000\t39\t1\t1\t1\t1\t2\n\n7\t1383260400000\t39\tx\t1\t1\t1\t2\n")
        recs, rej = parse_cdr(p)
        assert rej == 1
        assert len(recs) == 1 and recs[0].aux["sms_in"] == 0.0 and recs[0].aux["sms_out"] == 1.0

    def test_empty_file_and_bad_schema(self, tmp_path):
        p = tmp_path / "e.tsv"
        p.write_text("\n\n")
        with pytest.raises(IngestError, match="empty"):
            parse_cdr(p)
        p.write_text("1\t2\t3\n")
        with pytest.raises(ConfigError, match="internet"):
            parse_cdr(p, schema={"square_id": 0, "timestamp": 1})

    def test_remapped_csv(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("2.5,3,1383260400000\n")
        recs, _ = parse_cdr(p, schema={"internet": 0, "square_id": 1, "timestamp": 2}, delimiter=",")
        assert recs[0] == CdrRecord(3, 1383260400000, 2.5, {})


class TestGrid:
    def test_cells_row_major(self, grid):
        cells = grid.cells()
        assert len(cells) == 25
        assert cells[:5] == [23, 24, 25, 26, 27] and cells[12] == 45

    def test_neighborhood_outside(self):
        with pytest.raises(ConfigError):
            GridSpec(10, 10, 1)


class TestAggregate:
    def test_sum_gap_and_filter(self, grid):
        recs = [CdrRecord(45, T0 + i * 600_000, 2.0) for i in range(6)]
        recs += [CdrRecord(45, T0 + 2 * HOUR_MS, 1.0), CdrRecord(1, T0, 99.0)]
        m, hours = aggregate_hourly(recs, grid)
        assert m.shape == (3, 25)
        assert m[0, 12] == 12.0 and m[1].sum() == 0.0 and m[2, 12] == 1.0
        assert m.sum() == 13.0
        assert hours[0] == T0 and np.all(np.diff(hours) == HOUR_MS)

    def test_no_records_in_neighborhood(self, grid):
        with pytest.raises(IngestError, match="neighborhood"):
            aggregate_hourly([CdrRecord(1, T0, 1.0)], grid)
        with pytest.raises(IngestError):
            aggregate_hourly([], grid)


class TestNormalize:
    def test_examples(self):
        y, s = minmax_normalize(np.array([[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]]))
        np.testing.assert_array_equal(y[:, 0], [0, 0.5, 1])
        np.testing.assert_array_equal(y[:, 1], [0, 0, 0])
        back = denormalize(np.array([[0.0, 0.3], [0.5, 0.9], [1.0, 0.0]]), s)
        np.testing.assert_array_equal(back[:, 0], [2, 4, 6])
        np.testing.assert_array_equal(back[:, 1], [5, 5, 5])

    def test_train_rows_and_clip(self):
        x = np.array([[0.0], [10.0], [30.0], [-5.0]])
        y, s = minmax_normalize(x, train_rows=slice(0, 2))
        np.testing.assert_array_equal(y[:, 0], [0, 1, 1.5, 0])
        assert s.max[0] == 10.0

    def test_shape_mismatch(self):
        with pytest.raises(IngestError):
            denormalize(np.zeros((2, 3)), NormStats(np.zeros(2), np.ones(2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(30, 4)) * rng.uniform(0.1, 1e3, 4)
        y, s = minmax_normalize(x)
        assert y.min() >= 0 and y.max() <= 1
        np.testing.assert_allclose(denormalize(y, s), x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


class TestMetadata:
    def test_tuesday_midnight_and_holiday(self):
        tue = int(dt.datetime(2013, 11, 5, tzinfo=dt.timezone.utc).timestamp() * 1000)
        e = encode_metadata([tue, tue + 5 * HOUR_MS], holidays={dt.date(2013, 11, 5)})
        assert e.values.shape == (2, 32)
        assert e.values[0, 1] == 1 and e.values[0, 7] == 1 and e.values[1, 12] == 1
        assert e.values[0, 31] == 1
        np.testing.assert_array_equal(e.values[:, :7].sum(1), 1)
        np.testing.assert_array_equal(e.values[:, 7:31].sum(1), 1)

    def test_load_holidays(self, tmp_path):
        p = tmp_path / "h.txt"
        p.write_text("2013-12-25  # xmas\n\n2014-01-01\n")
        assert load_holidays(p) == {dt.date(2013, 12, 25), dt.date(2014, 1, 1)}


class TestSocial:
    hours = [T0, T0 + HOUR_MS]

    def test_no_events(self):
        e = encode_social([], self.hours)
        assert e.values.shape == (2, 5) and not e.values.any()

    def test_counts(self):
        ev = [(T0, 1, "a", "tweet"), (T0 + 10, 1, "b", "tweet"), (T0 + 20, 2, "a", "tweet"),
              (T0, 1, None, "news"), (T0, 1, None, "sport"), (T0, 1, None, "weather")]
        e = encode_social(ev, self.hours, normalize=False)
        assert e.names == ["tweets", "users", "article_news", "article_sport", "article_other"]
        np.testing.assert_array_equal(e.values[0], [3, 2, 1, 1, 1])
        np.testing.assert_array_equal(e.values[1], 0)

    def test_cell_filter_and_normalize(self):
        ev = [(T0, 1, "a", "tweet"), (T0 + HOUR_MS, 1, "a", "tweet"), (T0 + HOUR_MS, 1, "b", "tweet"),
              (T0, 99, "c", "tweet")]
        e = encode_social(ev, self.hours, cells=[1])
        np.testing.assert_array_equal(e.values[:, 0], [0, 1])


class TestWindows:
    def test_counts(self):
        x, e = np.zeros((240, 25)), np.zeros((240, 3))
        assert len(build_windows(x, e, 48, 24)) == 169
        assert len(build_windows(x[:72], e[:72], 48, 24)) == 1
        with pytest.raises(IngestError, match="72"):
            build_windows(x[:71], e[:71], 48, 24)

    def test_contents(self):
        x = np.arange(20.0)[:, None] * np.ones((1, 2))
        e = -x[:, :1]
        s = build_windows(x, e, 4, 2, stride=3)
        np.testing.assert_array_equal(s.inputs[1, :, 0], [3, 4, 5, 6])
        np.testing.assert_array_equal(s.targets[1, :, 0], [7, 8])
        np.testing.assert_array_equal(s.exo[1, :, 0], [-3, -4, -5, -6])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 30), st.integers(1, 30), st.integers(1, 7))
    def test_count_vs_brute_force(self, hours, t_in, h, stride):
        brute = sum(1 for s in range(0, hours, stride) if s + t_in + h <= hours)
        assert window_count(hours, t_in, h, stride) == brute
        if brute:
            assert len(build_windows(np.zeros((hours, 1)), np.zeros((hours, 1)), t_in, h, stride)) == brute


class TestSplit:
    def test_sixteen_days(self):
        H = 16 * 24
        s = build_windows(np.zeros((H, 25)), np.zeros((H, 32)), 48, 24)
        sp = split_last_days(s, H)
        f, l = sp.test.target_hours()
        assert f.min() >= H - 168 and l.max() == H - 1
        assert len(sp.test) == 145
        trl = sp.train.target_hours()[1].max()
        vf, vl = sp.val.target_hours()
        assert trl < vf.min() and vl.max() < f.min()
        every = np.concatenate([sp.train.start, sp.val.start, sp.test.start, s.start[sp.dropped]])
        assert len(every) == len(s) and len(np.unique(every)) == len(s)

    def test_h1_partition_is_complete(self):
        H = 16 * 24
        s = build_windows(np.zeros((H, 2)), np.zeros((H, 1)), 48, 1)
        sp = split_last_days(s, H)
        assert len(sp.dropped) == 0
        assert len(sp.train) + len(sp.val) + len(sp.test) == len(s)

    def test_errors(self):
        H = 16 * 24
        s = build_windows(np.zeros((H, 2)), np.zeros((H, 1)), 48, 1)
        with pytest.raises(IngestError, match="val"):
            split_last_days(s, H, val_days=0)
        with pytest.raises(IngestError):
            split_last_days(s, H, test_days=15, val_days=1)


class TestSynth:
    def test_determinism(self):
        a, ea = synth_generate(days=5, seed=3, profile=SynthProfile(events=3))
        b, eb = synth_generate(days=5, seed=3, profile=SynthProfile(events=3))
        assert a.tobytes() == b.tobytes() and ea.values.tobytes() == eb.values.tobytes()
        assert a.shape == (120, 25) and ea.values.shape[0] == 120

    def test_periodic_without_noise(self):
        x, _ = synth_generate(days=6, seed=1, profile=SynthProfile(noise=0.0, weekly=0.0))
        np.testing.assert_array_equal(x[24:], x[:-24])

    def test_spatial_correlation(self):
        x, _ = synth_generate(days=40, seed=2, profile=SynthProfile(daily=0.0, weekly=0.0, spatial_mixing=1.0))
        c = np.corrcoef(x.T)
        adjacent = np.mean([c[i, i + 1] for i in range(25) if i % 5 != 4])
        corners = np.mean([c[0, 24], c[4, 20]])
        assert adjacent > corners

    def test_event_spikes_raise_tweets_and_traffic(self):
        p = SynthProfile(events=4, noise=0.0, event_magnitude=2.0)
        x, e = synth_generate(days=10, seed=0, profile=p)
        q, _ = synth_generate(days=10, seed=0, profile=SynthProfile(events=0, noise=0.0))
        assert (x - q)[:, p.event_cell].max() >= 1.9
        assert e.values[:, e.names.index("tweets")].max() == 1.0

    def test_too_few_days(self):
        with pytest.raises(IngestError):
            synth_generate(days=2)


def test_dataset_round_trip(tmp_path):
    x, e = synth_generate(days=12, seed=0)
    ds = prepare(x, e, start_ms=T0, meta={"seed": 0})
    assert ds.traffic[: ds.val_start].max() <= 1.0
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.traffic.tobytes() == ds.traffic.tobytes()
    assert back.exo.names == ds.exo.names and back.meta == {"seed": 0}
    assert (back.val_start, back.test_start) == (ds.val_start, ds.test_start)
    raw = np.fromfile(tmp_path / "d" / "raw.f64", dtype="<f8")
    assert raw.size == x.size
    sp = back.split(48, 24)
    assert len(sp.test) > 0


def test_dataset_truncated(tmp_path):
    x, e = synth_generate(days=12, seed=0)
    save_dataset(prepare(x, e), tmp_path)
    with open(tmp_path / "exo.f64", "r+b") as fh:
        fh.truncate(16)
    with pytest.raises(IngestError, match="expected"):
        load_dataset(tmp_path)


def test_exo_columns_checks_names():
    with pytest.raises(IngestError):
        ExoColumns(np.zeros((2, 3)), ["a"])
