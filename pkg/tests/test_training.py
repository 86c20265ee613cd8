import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtse.cells import CellConfig
from mtse.encoder import Encoder, EncoderConfig, SequenceSample, stack_samples
from mtse.synthdata import Dataset, SceneSpec, generate_dataset
from mtse.tensor import NumericalError
from mtse.training import (
    CheckpointError,
    ConfigMismatchError,
    OptimizerState,
    TrainConfig,
    clip_gradients,
    evaluate,
    fit,
    history_csv,
    load_checkpoint,
    optimizer_step,
    round_to_storage,
    save_checkpoint,
    subsample_sequence,
)


def tiny_dataset(n=6, T=5, classes=3, seed=0):
    samples, splits = generate_dataset(SceneSpec(T=T, n_classes=classes, n_bands=4, seed=seed), n)
    return Dataset(samples, splits, classes)


def tiny_config(kind="gru", r=4, classes=3, d=6):
    return EncoderConfig(CellConfig(kind=kind, r=r, d=d), classes)


class TestSubsample:
    def test_identity_when_short(self):
        rng = np.random.default_rng(0)
        assert subsample_sequence(5, 5, rng).tolist() == [0, 1, 2, 3, 4]
        assert subsample_sequence(3, 30, rng).tolist() == [0, 1, 2]

    def test_seeded_repeatable(self):
        a = subsample_sequence(10, 3, np.random.default_rng(7))
        b = subsample_sequence(10, 3, np.random.default_rng(7))
        assert a.tolist() == b.tolist() and len(a) == 3

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 60), st.integers(0, 2**32 - 1))
    def test_strictly_increasing(self, avail, keep, seed):
        idx = subsample_sequence(avail, keep, np.random.default_rng(seed))
        assert len(idx) == min(avail, keep)
        assert np.all(np.diff(idx) > 0) and idx.min() >= 0 and idx.max() < avail

    def test_empty(self):
        with pytest.raises(ValueError):
            subsample_sequence(0, 3, np.random.default_rng(0))


class TestOptimizer:
    def test_sgd(self):
        p = {"w": np.array([1.0])}
        optimizer_step(p, {"w": np.array([0.5])}, OptimizerState(), TrainConfig(optimizer="sgd", lr=0.1))
        assert p["w"][0] == pytest.approx(0.95, abs=1e-15)

    @pytest.mark.parametrize("opt", ["sgd", "adam"])
    def test_zero_gradient(self, opt):
        p = {"w": np.array([1.0, -2.0])}
        optimizer_step(p, {"w": np.zeros(2)}, OptimizerState(), TrainConfig(optimizer=opt))
        assert p["w"].tolist() == [1.0, -2.0]

    def test_adam_first_step(self):
        p = {"w": np.zeros(4)}
        optimizer_step(p, {"w": np.ones(4)}, OptimizerState(), TrainConfig(lr=1e-3))
        # lr * 1 / (1 + eps)
        np.testing.assert_allclose(p["w"], -1e-3 / (1 + 1e-8), rtol=0, atol=1e-15)

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            optimizer_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, OptimizerState(), TrainConfig())

    def test_clip_keeps_direction(self):
        rng = np.random.default_rng(0)
        g = {"a": rng.normal(size=5), "b": rng.normal(size=(2, 3))}
        flat = np.concatenate([v.ravel() for v in g.values()])
        norm = clip_gradients(g, 0.5)
        clipped = np.concatenate([v.ravel() for v in g.values()])
        assert norm == pytest.approx(np.linalg.norm(flat))
        assert np.linalg.norm(clipped) == pytest.approx(0.5, abs=1e-12)
        cos = clipped @ flat / (np.linalg.norm(clipped) * np.linalg.norm(flat))
        assert abs(cos - 1.0) < 1e-12

    def test_clip_noop_below_threshold(self):
        g = {"a": np.array([0.1, 0.1])}
        clip_gradients(g, 10.0)
        assert g["a"].tolist() == [0.1, 0.1]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestFit:
    def test_zero_lr_keeps_parameters(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        init = Encoder.create(cfg, seed=0).values()
        res = fit(ds, cfg, TrainConfig(lr=0.0, batch_size=2, n_keep=3))
        for k, v in res.encoder.values().items():
            np.testing.assert_array_equal(v, init[k])

    def test_single_sample_overfit(self):
        ds = tiny_dataset(n=1, T=4)
        ds.splits[:] = 0
        cfg = tiny_config(r=6)
        res = fit(ds, cfg, TrainConfig(lr=1e-2, epochs=200, batch_size=1, n_keep=4))
        losses = [h.loss for h in res.history]
        assert len(losses) == 200
        assert losses[-1] < 0.1 * losses[0]
        assert evaluate(res.encoder, ds.samples).overall_accuracy > 0.99

    def test_deterministic_history(self):
        ds = tiny_dataset()
        tc = TrainConfig(epochs=2, batch_size=2, n_keep=3, seed=5)
        a = fit(ds, tiny_config(), tc)
        b = fit(ds, tiny_config(), tc)
        assert history_csv(a.history) == history_csv(b.history)
        assert a.report.to_dict() == b.report.to_dict()

    def test_max_steps(self):
        res = fit(tiny_dataset(), tiny_config(), TrainConfig(epochs=5, batch_size=1, max_steps=3))
        assert [h.step for h in res.history] == [1, 2, 3]

    def test_periodic_checkpoints(self, tmp_path):
        fit(tiny_dataset(), tiny_config(), TrainConfig(epochs=1, batch_size=1, checkpoint_interval=2),
            out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir())[:1] == ["checkpoint_000002.mtck"]

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigMismatchError):
            fit(tiny_dataset(), tiny_config(d=9), TrainConfig())
        with pytest.raises(ConfigMismatchError):
            fit(tiny_dataset(), tiny_config(classes=5), TrainConfig())

    def test_empty_split(self):
        ds = tiny_dataset()
        ds.splits[:] = 1
        with pytest.raises(ValueError):
            fit(ds, tiny_config(), TrainConfig())


class TestEvaluate:
    def test_row_count_and_repeatable(self):
        ds = tiny_dataset()
        enc = Encoder.create(tiny_config(), seed=1)
        a = evaluate(enc, ds.samples)
        b = evaluate(enc, ds.samples)
        assert len(a.rows) == 3
        assert a.table_csv() == b.table_csv()

    def test_padding_layout_independent(self):
        ds = tiny_dataset()
        enc = Encoder.create(tiny_config(), seed=1)
        padded = [s.with_padding([0, 2]) for s in ds.samples]
        assert evaluate(enc, ds.samples).cm == evaluate(enc, padded).cm

    def test_class_mismatch(self):
        ds = tiny_dataset(classes=3)
        for s in ds.samples:
            s.y[0, 0] = 2
        enc = Encoder.create(tiny_config(classes=2), seed=0)
        with pytest.raises(ConfigMismatchError):
            evaluate(enc, ds.samples)


class TestCheckpoint:
    def trained(self, kind="lstm"):
        res = fit(tiny_dataset(), tiny_config(kind), TrainConfig(epochs=1, batch_size=2, n_keep=3))
        return res

    @pytest.mark.parametrize("kind", ["gru", "lstm"])
    def test_round_trip_forward_bitwise(self, tmp_path, kind):
        res = self.trained(kind)
        path = tmp_path / "c.mtck"
        save_checkpoint(path, res.encoder, res.state, metrics={"oa": 0.5})
        ck = load_checkpoint(path)
        round_to_storage(res.encoder)
        X, M, _ = stack_samples(tiny_dataset().samples)
        assert ck.encoder.predict(X, M).tobytes() == res.encoder.predict(X, M).tobytes()
        assert ck.step == res.state.t and ck.metrics == {"oa": 0.5}
        assert set(ck.state.m) == set(res.state.m)

    def test_resave_is_byte_identical(self, tmp_path):
        res = self.trained()
        save_checkpoint(tmp_path / "a", res.encoder, res.state)
        ck = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", ck.encoder, ck.state)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_truncated(self, tmp_path):
        res = self.trained()
        save_checkpoint(tmp_path / "a", res.encoder, res.state)
        raw = (tmp_path / "a").read_bytes()
        for cut in (3, 40, len(raw) - 5):
            (tmp_path / "b").write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "b")

    def test_bad_magic_and_version(self, tmp_path):
        res = self.trained()
        save_checkpoint(tmp_path / "a", res.encoder)
        raw = (tmp_path / "a").read_bytes()
        (tmp_path / "b").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "b")
        (tmp_path / "b").write_bytes(raw[:4] + b"\x07" + raw[5:])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "b")

    def test_wrong_classes(self, tmp_path):
        res = self.trained()
        save_checkpoint(tmp_path / "a", res.encoder)
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(tmp_path / "a", n_classes=5)
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(tmp_path / "a", expect=tiny_config("gru"))

    def test_layout(self, tmp_path):
        enc = Encoder.create(tiny_config(), seed=0)
        save_checkpoint(tmp_path / "a", enc)
        raw = (tmp_path / "a").read_bytes()
        assert raw[:4] == b"MTCK"
        assert int.from_bytes(raw[4:8], "little") == 1


def test_history_csv_format():
    from mtse.training import HistoryRow, timing_csv

    rows = [HistoryRow(1, 0, 0.5, 1.25), HistoryRow(2, 0, 0.1 + 0.2, 2.5)]
    assert history_csv(rows) == "step,epoch,loss\n1,0,0.5\n2,0,0.30000000000000004\n"
    assert timing_csv(rows) == "step,wall_seconds\n1,1.250\n2,2.500\n"
