"""Training recipe: loss, schedule, Adam, early stopping, checkpoints."""

import numpy as np
import pytest

from tfmforge.elasticity import ElasticSubstrate, generate_dataset, Dataset
from tfmforge.layers import ParamSet
from tfmforge.models import build_model
from tfmforge.rng import RngStream
from tfmforge.tensor import Tensor
from tfmforge.training import (AdamState, EarlyStopState, TrainConfig,
                               adam_step, evaluate_loss, load_checkpoint,
                               mse_loss, read_checkpoint, save_checkpoint,
                               step_lr, train, write_history_csv)

TINY = dict(n=16, unet_widths=(2, 2, 2, 2), vit_patch=4, vit_dim=4,
            vit_layers=1, vit_heads=2, hybrid_dim=4, hybrid_layers=1)


def tiny(kind="unet", seed=0):
    return build_model(kind, RngStream(seed, "init"), dropout=0.1, **TINY)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("train-ds")
    generate_dataset(out, (8, 3, 3), ElasticSubstrate(n=16), seed=1)
    ds = Dataset(out)
    return ds.load_split("train"), ds.load_split("val"), ds.load_split("test")


class TestLoss:
    def test_hand_value(self):
        pred = Tensor.from_values([[1.0, 2.0], [3.0, 4.0]])
        target = Tensor.from_values([[1.0, 0.0], [0.0, 0.0]])
        # squared diffs: 0, 4, 9, 16 -> mean 29/4
        assert mse_loss(pred, target).item() == pytest.approx(29.0 / 4.0)

    def test_batch_average_equals_mean_of_per_sample(self):
        rng = RngStream(0, "mse")
        p = rng.normal((4, 2, 8, 8))
        t = rng.normal((4, 2, 8, 8))
        batch = mse_loss(Tensor(p), Tensor(t)).item()
        per = np.mean([mse_loss(Tensor(p[k]), Tensor(t[k])).item() for k in range(4)])
        assert batch == pytest.approx(per)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            mse_loss(Tensor.zeros((2, 3)), Tensor.zeros((3, 2)))


class TestSchedule:
    def test_reference_schedule_values(self):
        # lr0=0.0002, decay 0.9 every 40 epochs
        assert step_lr(0, 0.0002, 0.9, 40) == pytest.approx(0.0002)
        assert step_lr(39, 0.0002, 0.9, 40) == pytest.approx(0.0002)
        assert step_lr(40, 0.0002, 0.9, 40) == pytest.approx(0.00018)
        assert step_lr(80, 0.0002, 0.9, 40) == pytest.approx(0.000162)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            step_lr(-1, 0.0002, 0.9, 40)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)
        with pytest.raises(ValueError):
            TrainConfig(gamma=0.0)
        with pytest.raises(ValueError):
            TrainConfig(patience=0)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # with bias correction, |delta| = lr * g/|g| = lr on step 1
        p = ParamSet()
        p.add("w", Tensor(np.array([1.0, -2.0]), requires_grad=True))
        p["w"].grad = np.array([0.5, -3.0])
        st = AdamState(p)
        adam_step(p, st, lr=0.01)
        np.testing.assert_allclose(p["w"].data, [1.0 - 0.01, -2.0 + 0.01], atol=1e-6)
        assert st.step_count == 1

    def test_converges_on_quadratic(self):
        p = ParamSet()
        p.add("w", Tensor(np.array([5.0]), requires_grad=True))
        st = AdamState(p)
        for _ in range(400):
            p.zero_grad()
            w = p["w"]
            loss = mse_loss(w, Tensor(np.array([1.5])))
            loss.backward()
            adam_step(p, st, lr=0.05)
        assert abs(p["w"].data[0] - 1.5) < 1e-3

    def test_nonfinite_gradient_names_parameter(self):
        p = ParamSet()
        p.add("layer.weight", Tensor(np.array([1.0]), requires_grad=True))
        p["layer.weight"].grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="layer.weight"):
            adam_step(p, AdamState(p), lr=0.01)

    def test_skips_parameters_without_gradients(self):
        p = ParamSet()
        p.add("a", Tensor(np.array([1.0]), requires_grad=True))
        before = p["a"].data.copy()
        adam_step(p, AdamState(p), lr=0.1)
        np.testing.assert_array_equal(p["a"].data, before)


class TestEarlyStopping:
    def test_strict_improvement_and_patience(self):
        p = ParamSet()
        p.add("w", Tensor(np.array([0.0]), requires_grad=True))
        st = EarlyStopState(patience=2)
        assert st.update(1.0, p, 0) == "continue"
        p["w"].data[:] = 99.0  # weights at the non-improving epochs
        assert st.update(1.0, p, 1) == "continue"  # equal is not better
        assert st.update(1.2, p, 2) == "stop"
        assert st.best_epoch == 0
        st.restore(p)
        np.testing.assert_array_equal(p["w"].data, [0.0])

    def test_counter_resets_on_improvement(self):
        p = ParamSet()
        p.add("w", Tensor(np.array([0.0]), requires_grad=True))
        st = EarlyStopState(patience=2)
        st.update(1.0, p, 0)
        st.update(1.5, p, 1)
        assert st.update(0.5, p, 2) == "continue"
        assert st.since_improvement == 0
        assert st.best_epoch == 2


class TestTrainLoop:
    def test_loss_decreases_and_history_complete(self, small_data):
        tr, va, _ = small_data
        m = tiny()
        res = train(m, tr, va, TrainConfig(lr0=1e-3, max_epochs=4, seed=0))
        assert res.epochs_run == 4
        assert [h["epoch"] for h in res.history] == [0, 1, 2, 3]
        assert all(set(h) == {"epoch", "lr", "train_loss", "val_loss"}
                   for h in res.history)
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
        assert res.best_val_loss == min(h["val_loss"] for h in res.history)

    def test_model_keeps_best_validation_weights(self, small_data):
        tr, va, _ = small_data
        m = tiny()
        res = train(m, tr, va, TrainConfig(lr0=1e-3, max_epochs=3, seed=0))
        held_out = evaluate_loss(m, va[0], va[1])
        assert held_out == pytest.approx(res.best_val_loss, rel=1e-6)

    def test_deterministic_for_fixed_seed(self, small_data):
        tr, va, _ = small_data
        results = []
        for _ in range(2):
            m = tiny(seed=3)
            res = train(m, tr, va, TrainConfig(lr0=1e-3, max_epochs=2, seed=5))
            results.append((res.history, {n: m.params[n].data.copy()
                                          for n in m.params.names()}))
        assert results[0][0] == results[1][0]  # bitwise-equal float history
        for n in results[0][1]:
            np.testing.assert_array_equal(results[0][1][n], results[1][1][n])

    def test_empty_split_rejected(self, small_data):
        tr, va, _ = small_data
        with pytest.raises(ValueError, match="non-empty"):
            train(tiny(), (tr[0][:0], tr[1][:0], None), va, TrainConfig())

    def test_history_csv_bytes_deterministic(self, tmp_path):
        history = [{"epoch": 0, "lr": 0.0002, "train_loss": 1.0 / 3.0,
                    "val_loss": 2.0 / 3.0}]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_history_csv(a, history)
        write_history_csv(b, history)
        assert a.read_bytes() == b.read_bytes()
        text = a.read_text()
        assert text.splitlines()[0] == "epoch,lr,train_loss,val_loss"
        assert repr(1.0 / 3.0) in text


class TestCheckpoints:
    def test_round_trip_restores_weights(self, tmp_path):
        m = tiny("hybrid", seed=4)
        path = tmp_path / "m.tfck"
        save_checkpoint(path, m, config={"n": 16}, epoch=7,
                        history=[{"epoch": 0, "lr": 1e-3,
                                  "train_loss": 1.0, "val_loss": 2.0}])
        m2 = tiny("hybrid", seed=99)
        header = load_checkpoint(path, m2)
        assert header["model_kind"] == "hybrid"
        assert header["epoch"] == 7
        assert header["config"] == {"n": 16}
        for n in m.params.names():
            np.testing.assert_array_equal(m2.params[n].data, m.params[n].data)

    def test_optimizer_state_round_trip(self, tmp_path):
        m = tiny(seed=5)
        opt = AdamState(m.params)
        opt.step_count = 3
        for n in opt.m:
            opt.m[n] += 0.25
        path = tmp_path / "m.tfck"
        save_checkpoint(path, m, config={}, optimizer=opt)
        header, records = read_checkpoint(path)
        assert header["optimizer_step"] == 3
        some = m.params.names()[0]
        np.testing.assert_array_equal(records[f"__opt__.m.{some}"], opt.m[some])
        # optimizer records must not break parameter-name validation
        load_checkpoint(path, tiny(seed=6))

    def test_kind_mismatch(self, tmp_path):
        m = tiny("unet")
        path = tmp_path / "m.tfck"
        save_checkpoint(path, m, config={})
        with pytest.raises(ValueError, match="kind"):
            load_checkpoint(path, tiny("vit"))

    def test_name_mismatch_lists_missing_and_extra(self, tmp_path):
        m = tiny("unet")
        path = tmp_path / "m.tfck"
        save_checkpoint(path, m, config={})
        other = build_model("unet", RngStream(0, "init"), n=16,
                            unet_widths=(3, 3, 3, 3), dropout=0.0)
        # same names but different shapes -> shape error path
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(path, other)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.tfck"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(Exception, match="magic"):
            read_checkpoint(path)

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        a, b = tmp_path / "a.tfck", tmp_path / "b.tfck"
        save_checkpoint(a, tiny(seed=8), config={"k": 1})
        save_checkpoint(b, tiny(seed=8), config={"k": 1})
        assert a.read_bytes() == b.read_bytes()
