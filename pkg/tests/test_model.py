import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from emasynth.errors import ConfigError, DegenerateDataError, DomainError
from emasynth.model import (
    AdamState,
    Checkpoint,
    LstmParams,
    LstmSpec,
    TrainHyper,
    adam_step,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)


def naive_forward(params, X):
    """Independent per-timestep scalar evaluation of the same equations."""

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    spec = params.spec
    H = spec.hidden
    seq = [list(map(float, row)) for row in X]
    for layer in params.layers:
        W_x, W_h = layer["W_x"], layer["W_h"]
        b = layer["b_ih"] + layer["b_hh"]
        h = [0.0] * H
        c = [0.0] * H
        out_seq = []
        for x in seq:
            z = []
            for k in range(4 * H):
                acc = float(b[k])
                for j, xj in enumerate(x):
                    acc += float(W_x[k, j]) * xj
                for j in range(H):
                    acc += float(W_h[k, j]) * h[j]
                z.append(acc)
            new_h, new_c = [], []
            for u in range(H):
                i = sigmoid(z[u])
                f = sigmoid(z[H + u])
                g = math.tanh(z[2 * H + u])
                o = sigmoid(z[3 * H + u])
                cu = f * c[u] + i * g
                hu = o * math.tanh(cu)
                new_c.append(cu)
                new_h.append(hu)
            h, c = new_h, new_c
            out_seq.append(h)
        seq = out_seq
    Y = []
    for h in seq:
        row = []
        for k in range(spec.output_dim):
            acc = float(params.b_out[k])
            for j in range(H):
                acc += float(params.W_out[k, j]) * h[j]
            row.append(acc)
        Y.append(row)
    return np.array(Y).reshape(len(Y), spec.output_dim)


def finite_difference_grad(params, X, Y, h=1e-5):
    grad = np.empty_like(params.flat)
    for k in range(params.flat.size):
        orig = params.flat[k]
        params.flat[k] = orig + h
        lp = float(np.mean((forward(params, X) - Y) ** 2))
        params.flat[k] = orig - h
        lm = float(np.mean((forward(params, X) - Y) ** 2))
        params.flat[k] = orig
        grad[k] = (lp - lm) / (2 * h)
    return grad


def gradient_max_rel_error(spec, seed, T):
    rng = np.random.default_rng(seed)
    params = LstmParams.init(spec, rng)
    X = rng.standard_normal((T, spec.input_dim))
    Y = rng.standard_normal((T, spec.output_dim))
    _, analytic = backward(params, X, Y)
    numeric = finite_difference_grad(params, X, Y)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))


class TestSpec:
    def test_parameter_count_formula(self):
        spec = LstmSpec(input_dim=6, output_dim=9, hidden=128, layers=4)
        expected = 4 * (6 * 128 + 128**2 + 2 * 128)
        expected += 3 * 4 * (128 * 128 + 128**2 + 2 * 128)
        expected += 128 * 9 + 9
        assert spec.parameter_count() == expected
        params = LstmParams.zeros(spec)
        assert params.flat.size == expected

    def test_bad_dims_rejected(self):
        with pytest.raises(ConfigError):
            LstmSpec(input_dim=0, output_dim=1).validate()


class TestForward:
    def test_zero_network_outputs_bias(self):
        spec = LstmSpec(input_dim=3, output_dim=2, hidden=4, layers=2)
        params = LstmParams.zeros(spec)
        params.b_out[:] = [1.5, -2.0]
        X = np.random.default_rng(0).standard_normal((6, 3))
        Y = forward(params, X)
        assert_allclose(Y, np.tile([1.5, -2.0], (6, 1)), atol=1e-15)

    def test_empty_sequence(self):
        spec = LstmSpec(input_dim=3, output_dim=2, hidden=4, layers=1)
        params = LstmParams.zeros(spec)
        assert forward(params, np.zeros((0, 3))).shape == (0, 2)

    def test_matches_naive_loop_oracle(self):
        spec = LstmSpec(input_dim=6, output_dim=9, hidden=5, layers=4)
        rng = np.random.default_rng(1)
        params = LstmParams.init(spec, rng)
        X = rng.standard_normal((7, 6))
        got = forward(params, X)
        assert got.shape == (7, 9)
        assert_allclose(got, naive_forward(params, X), atol=1e-12)

    def test_causality(self):
        spec = LstmSpec(input_dim=4, output_dim=3, hidden=6, layers=2)
        rng = np.random.default_rng(2)
        params = LstmParams.init(spec, rng)
        X = rng.standard_normal((10, 4))
        full = forward(params, X)
        for t in (1, 4, 9):
            assert_allclose(forward(params, X[:t]), full[:t], atol=0.0)

    def test_shape_mismatch(self):
        spec = LstmSpec(input_dim=4, output_dim=3, hidden=6, layers=1)
        params = LstmParams.zeros(spec)
        with pytest.raises(DomainError):
            forward(params, np.zeros((5, 3)))


class TestBackward:
    def test_gradient_matches_central_differences(self):
        spec = LstmSpec(input_dim=3, output_dim=2, hidden=4, layers=2)
        err = gradient_max_rel_error(spec, seed=3, T=5)
        assert err < 1e-4

    def test_gradient_check_various_shapes(self):
        for seed, (di, do, h, l, T) in enumerate([
            (1, 1, 2, 1, 1),
            (2, 3, 3, 2, 4),
            (4, 2, 5, 3, 6),
        ]):
            spec = LstmSpec(input_dim=di, output_dim=do, hidden=h, layers=l)
            assert gradient_max_rel_error(spec, seed=seed + 10, T=T) < 1e-4

    def test_empty_sequence_zero_gradient(self):
        spec = LstmSpec(input_dim=3, output_dim=2, hidden=4, layers=1)
        params = LstmParams.zeros(spec)
        loss, grad = backward(params, np.zeros((0, 3)), np.zeros((0, 2)))
        assert loss == 0.0
        assert_allclose(grad, 0.0)

    def test_residual_scaling_doubles_gradient(self):
        spec = LstmSpec(input_dim=3, output_dim=2, hidden=4, layers=2)
        rng = np.random.default_rng(4)
        params = LstmParams.init(spec, rng)
        X = rng.standard_normal((6, 3))
        pred = forward(params, X)
        delta = rng.standard_normal(pred.shape)
        _, g1 = backward(params, X, pred - delta)
        _, g2 = backward(params, X, pred - 2.0 * delta)
        assert_allclose(g2, 2.0 * g1, atol=1e-10)


class TestAdam:
    def test_first_step_hand_evaluated(self):
        hyper = TrainHyper(lr=0.001)
        flat = np.array([1.0])
        state = AdamState.zeros(1)
        adam_step(flat, np.array([1.0]), state, hyper)
        assert_allclose(1.0 - flat[0], 0.001 / (1.0 + 1e-8), atol=1e-15)
        assert abs(1.0 - flat[0] - 0.000999999990) < 1e-12

    def test_zero_gradient_no_motion(self):
        hyper = TrainHyper()
        flat = np.array([0.5, -0.5])
        state = AdamState.zeros(2)
        for _ in range(10):
            adam_step(flat, np.zeros(2), state, hyper)
        assert_allclose(flat, [0.5, -0.5], atol=0.0)

    def test_elementwise_independence(self):
        hyper = TrainHyper(lr=0.01)
        joint = np.array([1.0, 2.0])
        sj = AdamState.zeros(2)
        a = np.array([1.0])
        b = np.array([2.0])
        sa, sb = AdamState.zeros(1), AdamState.zeros(1)
        for step in range(5):
            g = np.array([0.3 * (step + 1), -0.7])
            adam_step(joint, g, sj, hyper)
            adam_step(a, g[:1], sa, hyper)
            adam_step(b, g[1:], sb, hyper)
        assert_allclose(joint, np.concatenate([a, b]), atol=0.0)


class TestTrain:
    def _toy_seqs(self, n=8, T=20, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((T, 2))
        Y = np.column_stack([X[:, 0] * 0.5 + X[:, 1], X[:, 1] - 0.25 * X[:, 0]])
        return [(f"u{i}", X, Y) for i in range(n)]

    def test_memorization_sanity(self):
        seqs = self._toy_seqs()
        spec = LstmSpec(input_dim=2, output_dim=2, hidden=8, layers=1)
        hyper = TrainHyper(lr=0.02, max_epochs=30, patience=30, seed=1)
        ckpt = train(seqs, hyper, spec)
        assert ckpt.curve[-1]["train_mse"] < 1e-3

    def test_determinism_bit_for_bit(self, tmp_path):
        seqs = self._toy_seqs()
        spec = LstmSpec(input_dim=2, output_dim=2, hidden=4, layers=1)
        hyper = TrainHyper(lr=0.01, max_epochs=3, seed=5)
        a = train(seqs, hyper, spec, extras={"note": 1})
        b = train(seqs, hyper, spec, extras={"note": 1})
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(pa, a)
        save_checkpoint(pb, b)
        assert pa.read_bytes() == pb.read_bytes()

    def test_loss_decreases_on_convex_toy(self):
        seqs = self._toy_seqs(n=6, T=40, seed=3)
        spec = LstmSpec(input_dim=2, output_dim=2, hidden=4, layers=1)
        hyper = TrainHyper(lr=0.02, max_epochs=5, patience=5, seed=2)
        ckpt = train(seqs, hyper, spec)
        losses = [e["train_mse"] for e in ckpt.curve[:5]]
        assert all(losses[i + 1] < losses[i] for i in range(len(losses) - 1))

    def test_early_stopping_respects_patience(self):
        seqs = self._toy_seqs(n=4, T=10)
        spec = LstmSpec(input_dim=2, output_dim=2, hidden=3, layers=1)
        hyper = TrainHyper(lr=0.5, max_epochs=50, patience=2, seed=0)
        ckpt = train(seqs, hyper, spec)
        assert len(ckpt.curve) <= 50
        assert ckpt.best_epoch <= len(ckpt.curve)

    def test_single_utterance_rejected(self):
        seqs = self._toy_seqs(n=1)
        spec = LstmSpec(input_dim=2, output_dim=2, hidden=3, layers=1)
        with pytest.raises(DegenerateDataError):
            train(seqs, TrainHyper(), spec)

    def test_checkpoint_round_trip_forward_identical(self, tmp_path):
        seqs = self._toy_seqs()
        spec = LstmSpec(input_dim=2, output_dim=2, hidden=4, layers=2)
        hyper = TrainHyper(lr=0.01, max_epochs=2, seed=7)
        ckpt = train(seqs, hyper, spec,
                     extras={"normalizer": {"mean": [0.0, 0.0], "std": [1.0, 1.0]}})
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
        assert loaded.extras == ckpt.extras
        assert loaded.curve == ckpt.curve
        X = np.random.default_rng(8).standard_normal((9, 2))
        before = forward(ckpt.params(), X)
        after = forward(loaded.params(), X)
        assert np.array_equal(before, after)
