from dataclasses import replace

import numpy as np
import pytest

from dssmcast.ingest import prepare, synth_generate
from dssmcast.model import ModelConfig, forward, init_params
from dssmcast.ndiff import Tensor, grad_check
from dssmcast.train import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    fit,
    rmse_loss,
    sweep,
    train,
)


@pytest.fixture(scope="module")
def split():
    x, e = synth_generate(days=11, seed=0)
    return prepare(x, e).split(6, 1, stride=2)


@pytest.fixture(scope="module")
def cfg(split):
    return ModelConfig(d_e=split.train.exo.shape[2], d_a=2, d_k=2, channels=1, t_in=6, horizon=1)


class TestLoss:
    def test_zero_and_hand_example(self):
        p = Tensor(np.ones((2, 1, 3)), True)
        loss = rmse_loss(p, np.ones((2, 1, 3)))
        loss.backward()
        assert loss.item() == 0.0 and not p.grad.any()
        assert rmse_loss(Tensor([0.0, 0.0]), [3.0, 4.0]).item() == pytest.approx(np.sqrt(12.5), rel=1e-15)

    def test_gradient(self):
        t = np.random.default_rng(0).normal(size=(3, 2, 4))
        assert grad_check(lambda p: rmse_loss(p, t), np.zeros_like(t)) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            rmse_loss(Tensor(np.zeros(3)), np.zeros(4))


class TestAdam:
    def test_first_step(self):
        p = {"w": Tensor(np.zeros(1), True)}
        adam_step(p, {"w": np.ones(1)}, AdamState.zeros(p), 1, TrainConfig())
        assert p["w"].data[0] == pytest.approx(-1e-3, rel=1e-7)

    def test_zero_gradient(self):
        p = {"w": Tensor(np.array([0.3, -2.0]), True)}
        adam_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), 1, TrainConfig(lr=0.1))
        np.testing.assert_array_equal(p["w"].data, [0.3, -2.0])

    def test_non_finite_aborts_without_change(self):
        p = {"a": Tensor(np.ones(2), True), "b": Tensor(np.ones(2), True)}
        st = AdamState.zeros(p)
        with pytest.raises(FloatingPointError, match="b"):
            adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, st, 1, TrainConfig())
        np.testing.assert_array_equal(p["a"].data, 1.0)
        assert not st.m["a"].any()

    def test_bad_step_index(self):
        p = {"a": Tensor(np.ones(2), True)}
        with pytest.raises(ValueError):
            adam_step(p, {"a": np.ones(2)}, AdamState.zeros(p), 0, TrainConfig())

    def test_config_validation(self):
        for bad in ({"lr": -1.0}, {"beta1": 1.0}, {"patience": 0}, {"batch_size": 0}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)

    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_decreases_loss(self, split, cfg, seed):
        p = init_params(cfg, seed)
        i = seed
        x, e, y = split.train.inputs[i : i + 1], split.train.exo[i : i + 1], split.train.targets[i : i + 1]
        loss = rmse_loss(forward(x, e, p, cfg).values, y)
        loss.backward()
        named = p.named_tensors()
        adam_step(named, {k: t.grad for k, t in named.items()}, AdamState.zeros(named), 1, TrainConfig(lr=1e-6))
        assert rmse_loss(forward(x, e, p, cfg).values, y).item() < loss.item()


class TestFit:
    def test_early_stop_contract(self, split):
        w = {"w": Tensor(np.zeros(1), True)}
        calls = []

        def evaluate_fn(s):
            calls.append(w["w"].data.copy())
            return np.full(s.targets.shape, 0.5 + len(calls))  # strictly worse every epoch

        rep = fit(w, lambda x, e: w["w"].reshape(1, 1, 1) + Tensor(np.zeros((len(x), 1, 25))), evaluate_fn, split,
                  TrainConfig(lr=0.1, patience=1, max_epochs=10))
        assert len(rep.val_rmse) == 2 and rep.best_epoch == 1 and rep.stopped_early
        np.testing.assert_array_equal(w["w"].data, calls[0])
        assert rep.best_val_rmse == min(rep.val_rmse)

    def test_lr_zero(self, split, cfg):
        p, rep = train(split, cfg, TrainConfig(lr=0.0, max_epochs=3, patience=5))
        assert p.flat().tobytes() == init_params(cfg, 0).flat().tobytes()
        assert len(set(rep.train_rmse)) == 1

    def test_divergence(self, split):
        w = {"w": Tensor(np.zeros(1), True)}
        with pytest.raises(TrainingDiverged) as info:
            fit(w, lambda x, e: Tensor(np.full((len(x), 1, 25), np.nan)), lambda s: s.targets, split, TrainConfig())
        assert info.value.report.diverged

    def test_empty_split(self, split):
        empty = replace(split, val=split.val.subset([]))
        with pytest.raises(ValueError, match="nonempty"):
            fit({}, None, None, empty, TrainConfig())


class TestTrain:
    def test_deterministic(self, split, cfg):
        tc = TrainConfig(lr=1e-2, max_epochs=2, seed=3)
        p1, r1 = train(split, cfg, tc)
        p2, r2 = train(split, cfg, tc)
        assert p1.flat().tobytes() == p2.flat().tobytes()
        d1, d2 = r1.to_json(), r2.to_json()
        d1.pop("wall_time"), d2.pop("wall_time")
        assert d1 == d2

    def test_report_files_and_notes(self, split, cfg, tmp_path):
        p, rep = train(split, replace(cfg, use_ar=False, variant="aekf"), TrainConfig(lr=1e-2, max_epochs=2))
        assert "branch disabled: ar" in rep.notes
        rep.write_json(tmp_path / "r.json")
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_rmse,val_rmse" and len(lines) == 3


class TestSweep:
    def test_grid_of_one_equals_train(self, split, cfg):
        tc = TrainConfig(lr=1e-2, max_epochs=2)
        res = sweep(split, cfg, tc, {"lr": [1e-2]})
        p, rep = train(split, cfg, tc)
        assert res.params.flat().tobytes() == p.flat().tobytes()
        assert res.report.best_val_rmse == rep.best_val_rmse

    def test_grid_argmin_and_failures(self, split, cfg):
        res = sweep(split, cfg, TrainConfig(max_epochs=1), {"lr": [1e-3, 1e-2, -1.0], "d_k": [1, 2]})
        assert len(res.table) == 6
        failed = [r for r in res.table if r["error"]]
        assert len(failed) == 2 and all(r["hparams"]["lr"] == -1.0 for r in failed)
        vals = [r["best_val_rmse"] for r in res.table if r["best_val_rmse"] is not None]
        assert res.report.best_val_rmse == min(vals)

    def test_bad_grid(self, split, cfg):
        with pytest.raises(ValueError):
            sweep(split, cfg, TrainConfig(), {})
        with pytest.raises(ValueError, match="unknown"):
            sweep(split, cfg, TrainConfig(), {"nope": [1]})
