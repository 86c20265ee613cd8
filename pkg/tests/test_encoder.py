import math

import numpy as np
import pytest

from mtse.cells import CellConfig
from mtse.encoder import (
    IGNORE,
    PAD_VALUE,
    Encoder,
    EncoderConfig,
    SequenceSample,
    classify,
    cross_entropy,
    cross_entropy_logit_grad,
    encode,
    forward,
    init_encoder_params,
    predict_map,
    stack_samples,
)
from mtse.gradcheck import run_gradcheck
from mtse.tensor import RunningStats, ShapeError
from mtse.training import OptimizerState, TrainConfig, optimizer_step


def toy_config(kind="gru", r=4, d=3, n=2, **kw):
    return EncoderConfig(CellConfig(kind=kind, r=r, d=d), n, **kw)


def random_sample(rng, T=4, h=6, w=6, d=3, n=2, masked=()):
    x = rng.normal(size=(T, h, w, d))
    mask = np.ones(T, bool)
    for t in masked:
        mask[t] = False
        x[t] = PAD_VALUE
    return SequenceSample(x, mask, rng.integers(0, n, size=(h, w)))


class TestSample:
    def test_padding_positions(self):
        s = random_sample(np.random.default_rng(0), T=3)
        p = s.with_padding([0, 2, 2, 3])
        assert p.mask.tolist() == [False, True, True, False, False, True, False]
        np.testing.assert_array_equal(p.x[p.mask], s.x)
        assert not p.x[~p.mask].any()

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            SequenceSample(np.zeros((3, 4, 4, 2)), np.ones(2, bool), np.zeros((4, 4)))
        with pytest.raises(ShapeError):
            SequenceSample(np.zeros((3, 4, 4, 2)), np.ones(3, bool), np.zeros((4, 5)))

    def test_stack_pads_short_sequences(self):
        rng = np.random.default_rng(0)
        X, M, Y = stack_samples([random_sample(rng, T=2), random_sample(rng, T=4)])
        assert X.shape == (2, 4, 6, 6, 3)
        assert M.tolist() == [[True, True, False, False], [True] * 4]


class TestEncode:
    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    def test_single_observation_halves_identical(self, kind):
        cfg = toy_config(kind)
        params = init_encoder_params(cfg, seed=1)
        rep = encode(random_sample(np.random.default_rng(1), T=1), params, cfg)
        assert rep.c_T.shape == (6, 6, 8)
        assert rep.c_T[..., :4].tobytes() == rep.c_T[..., 4:].tobytes()

    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    def test_trailing_pad_is_bitwise_invisible(self, kind):
        cfg = toy_config(kind)
        params = init_encoder_params(cfg, seed=2)
        s = random_sample(np.random.default_rng(2), T=5)
        a = encode(s, params, cfg).c_T
        b = encode(s.with_padding([5]), params, cfg).c_T
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    def test_reverse_swaps_halves(self, kind):
        cfg = toy_config(kind)
        params = init_encoder_params(cfg, seed=3)
        s = random_sample(np.random.default_rng(3), T=6)
        a = encode(s, params, cfg)
        b = encode(s.reversed(), params, cfg)
        np.testing.assert_allclose(b.forward, a.reverse, rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.reverse, a.forward, rtol=0, atol=1e-12)

    def test_order_matters(self):
        cfg = toy_config("lstm")
        params = init_encoder_params(cfg, seed=4)
        rng = np.random.default_rng(4)
        s = random_sample(rng, T=5)
        base = encode(s, params, cfg).c_T
        perm = SequenceSample(s.x[[1, 0, 3, 2, 4]], s.mask, s.y)
        assert np.abs(encode(perm, params, cfg).c_T - base).max() > 1e-6

    def test_all_padded_rejected(self):
        cfg = toy_config()
        s = random_sample(np.random.default_rng(0), T=2, masked=(0, 1))
        with pytest.raises(ValueError):
            encode(s, init_encoder_params(cfg), cfg)

    def test_depth_mismatch(self):
        cfg = toy_config(d=5)
        with pytest.raises(ShapeError):
            encode(random_sample(np.random.default_rng(0), d=3), init_encoder_params(cfg), cfg)

    def test_batch_matches_single(self):
        cfg = toy_config("gru")
        enc = Encoder.create(cfg, seed=0)
        rng = np.random.default_rng(5)
        samples = [random_sample(rng, T=4, masked=(1,)), random_sample(rng, T=4)]
        X, M, _ = stack_samples(samples)
        batch = enc.predict(X, M)
        for b, s in enumerate(samples):
            np.testing.assert_allclose(batch[b], enc.predict(s.x, s.mask), atol=1e-12)


class TestClassify:
    def test_uniform_when_weights_zero(self):
        cfg = toy_config(n=5)
        params = {k: np.zeros_like(v) for k, v in init_encoder_params(cfg).items()}
        params["head.proj.b"][:] = 0.7
        y_hat = classify(np.random.default_rng(0).normal(size=(4, 4, 8)), params, cfg)
        np.testing.assert_allclose(y_hat, 0.2, atol=1e-15)

    def test_full_scale_shape(self):
        cfg = EncoderConfig(CellConfig(kind="lstm", r=128, d=15), 17)
        params = init_encoder_params(cfg)
        y_hat = classify(np.random.default_rng(0).normal(size=(24, 24, 256)) * 0.1, params, cfg)
        assert y_hat.shape == (24, 24, 17)
        np.testing.assert_allclose(y_hat.sum(-1), 1.0, atol=1e-12)

    def test_depth_must_be_2r(self):
        cfg = toy_config()
        with pytest.raises(ShapeError):
            classify(np.zeros((4, 4, 4)), init_encoder_params(cfg), cfg)

    def test_argmax_scale_invariant(self):
        logits = np.random.default_rng(0).normal(size=(5, 5, 4))
        from mtse.tensor import softmax_channels

        base = predict_map(softmax_channels(logits))
        for a in (0.1, 3.0, 50.0):
            np.testing.assert_array_equal(predict_map(softmax_channels(a * logits)), base)


class TestLoss:
    def test_one_hot_is_zero(self):
        y = np.array([[0, 2], [1, 1]])
        y_hat = np.eye(3)[y]
        assert cross_entropy(y_hat, y) == 0.0

    def test_uniform(self):
        y_hat = np.full((3, 3, 4), 0.25)
        assert cross_entropy(y_hat, np.zeros((3, 3), int)) == pytest.approx(math.log(4), abs=1e-15)
        assert cross_entropy(y_hat, np.zeros((3, 3), int)) == pytest.approx(1.3863, abs=1e-4)

    def test_worked_pair(self):
        y_hat = np.array([[[0.5, 0.5], [0.75, 0.25]]])
        y = np.array([[0, 1]])
        # frozen: (ln 2 + ln 4) / 2
        assert cross_entropy(y_hat, y) == pytest.approx(1.0397207708399179, abs=1e-15)

    def test_ignore_and_clamp(self):
        y_hat = np.array([[[1.0, 0.0], [0.5, 0.5]]])
        assert cross_entropy(y_hat, np.array([[IGNORE, 0]])) == pytest.approx(math.log(2))
        assert cross_entropy(y_hat, np.array([[1, IGNORE]])) == pytest.approx(-math.log(1e-12))
        with pytest.raises(ValueError):
            cross_entropy(y_hat, np.array([[IGNORE, IGNORE]]))

    def test_perfect_prediction_zero_logit_gradient(self):
        y = np.array([[0, 1], [1, 0]])
        g = cross_entropy_logit_grad(np.eye(2)[y], y)
        assert np.abs(g).max() < 1e-9


class TestForwardBackward:
    def test_finite_and_deterministic(self):
        cfg = toy_config("lstm")
        s = random_sample(np.random.default_rng(0))
        params = init_encoder_params(cfg)
        _, l1 = forward(s, params, cfg, RunningStats.zeros(cfg.hidden))
        _, l2 = forward(s, params, cfg, RunningStats.zeros(cfg.hidden))
        assert math.isfinite(l1) and l1 == l2

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            Encoder.create(toy_config()).backward()

    @pytest.mark.parametrize("kind", ["gru", "lstm"])
    def test_padded_frame_gets_zero_gradient(self, kind):
        enc = Encoder.create(toy_config(kind), seed=0)
        s = random_sample(np.random.default_rng(1), T=5, masked=(2,))
        enc.forward_sample(s)
        _, dX = enc.backward(return_input_grad=True)
        assert not dX[2].any()
        assert np.abs(dX[[0, 1, 3, 4]]).max() > 0

    def test_masked_frame_has_no_parameter_influence(self):
        enc = Encoder.create(toy_config("gru"), seed=0)
        s = random_sample(np.random.default_rng(1), T=4, masked=(1,))
        enc.forward_sample(s)
        g1 = {k: v.copy() for k, v in enc.backward().items()}
        s2 = SequenceSample(s.x.copy(), s.mask, s.y)
        s2.x[1] = 123.0
        enc.zero_grad()
        enc.forward_sample(s2)
        g2 = enc.backward()
        assert all(g1[k].tobytes() == g2[k].tobytes() for k in g1)

    def test_end_to_end_gradcheck(self):
        entries = {e.op: e for e in run_gradcheck(seed=3, ops=("encoder_gru", "encoder_lstm"))}
        assert entries["encoder_gru"].error < 1e-4
        assert entries["encoder_lstm"].error < 1e-4

    def test_loss_decreases_on_fixed_sample(self):
        cfg = toy_config("gru", r=6, n=3)
        enc = Encoder.create(cfg, seed=0)
        rng = np.random.default_rng(6)
        s = random_sample(rng, T=4, n=3)
        state = OptimizerState()
        tc = TrainConfig(lr=1e-2)
        losses = []
        for _ in range(50):
            enc.zero_grad()
            _, loss = enc.forward_sample(s)
            optimizer_step(enc.values(), enc.backward(), state, tc)
            losses.append(loss)
        assert losses[-1] < 0.5 * losses[0]


class TestTrace:
    def test_lstm_trace(self):
        enc = Encoder.create(toy_config("lstm"), seed=0)
        s = random_sample(np.random.default_rng(0), T=5, masked=(1, 3))
        trace = enc.activations_trace(s, [0, 2])
        assert [e["t"] for e in trace] == [0, 2, 4]
        for e in trace:
            for g in ("i", "f", "o"):
                assert np.all((e[g] > 0) & (e[g] < 1))
            assert e["j"].shape == (2, 6, 6)
        first = trace[0]
        np.testing.assert_allclose(first["c"], first["i"] * first["j"], atol=1e-15)

    def test_gru_trace_h_matches_encoder(self):
        enc = Encoder.create(toy_config("gru"), seed=0)
        s = random_sample(np.random.default_rng(0), T=3)
        trace = enc.activations_trace(s, [1, 3])
        rep = enc.encode(s)
        np.testing.assert_array_equal(trace[-1]["h"], np.moveaxis(rep.forward[..., [1, 3]], -1, 0))

    def test_index_out_of_range(self):
        enc = Encoder.create(toy_config(), seed=0)
        with pytest.raises(IndexError):
            enc.activations_trace(random_sample(np.random.default_rng(0)), [4])

    def test_masked_only(self):
        enc = Encoder.create(toy_config(), seed=0)
        with pytest.raises(ValueError):
            enc.activations_trace(random_sample(np.random.default_rng(0), T=2, masked=(0, 1)), [0])
