import math

import numpy as np
import pytest

from fedcref import nn


def reference_forward_single(model, x_row):
    """Independent per-sample forward pass: explicit loops, math.exp."""
    a = [float(v) for v in x_row]
    ws, bs = model.weights(), model.biases()
    for l, (w, b) in enumerate(zip(ws, bs)):
        z = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += a[i] * w[i, j]
            z.append(s)
        if l < len(ws) - 1:
            a = [max(v, 0.0) for v in z]
        else:
            a = [1.0 / (1.0 + math.exp(-v)) for v in z]
    return np.array(a)


def reference_errors(model, samples):
    out = []
    for row in np.asarray(samples, dtype=float):
        rec = reference_forward_single(model, row)
        out.append(float(np.mean((row - rec) ** 2)))
    return np.array(out)


def numeric_gradient(model, batch, h=1e-5):
    """Central finite differences of the mean batch loss."""
    grad = np.zeros(model.n_params)
    base = model.params
    for i in range(model.n_params):
        bumped = base.copy()
        bumped[i] = base[i] + h
        up = nn.mean_loss(nn.Model(model.layer_sizes, bumped), batch)
        bumped[i] = base[i] - h
        down = nn.mean_loss(nn.Model(model.layer_sizes, bumped), batch)
        grad[i] = (up - down) / (2 * h)
    return grad


def zero_model(encoder_sizes):
    m = nn.init_model(encoder_sizes, seed=0)
    return nn.Model(m.layer_sizes, np.zeros_like(m.params))


class TestInitModel:
    def test_mirrored_decoder_widths(self):
        m = nn.init_model([784, 100, 64, 32], seed=7)
        assert m.layer_sizes == (784, 100, 64, 32, 64, 100, 784)

    def test_deterministic_from_seed(self):
        a = nn.init_model([4, 2], seed=0)
        b = nn.init_model([4, 2], seed=0)
        assert a.params.tobytes() == b.params.tobytes()
        c = nn.init_model([4, 2], seed=1)
        assert not np.array_equal(a.params, c.params)

    def test_zero_width_rejected(self):
        with pytest.raises(nn.InvalidArchitectureError):
            nn.init_model([4, 0, 2], seed=0)

    def test_negative_width_rejected(self):
        with pytest.raises(nn.InvalidArchitectureError):
            nn.init_model([4, -1], seed=0)

    def test_single_width_rejected(self):
        with pytest.raises(nn.InvalidArchitectureError):
            nn.init_model([4], seed=0)

    def test_biases_start_zero(self):
        m = nn.init_model([6, 3], seed=3)
        for b in m.biases():
            assert np.all(b == 0.0)

    def test_glorot_bounds(self):
        m = nn.init_model([30, 10], seed=5)
        for w in m.weights():
            limit = np.sqrt(6.0 / sum(w.shape))
            assert np.all(np.abs(w) <= limit)


class TestForward:
    def test_zero_weights_give_half(self):
        m = zero_model([5, 3])
        x = np.random.default_rng(0).random((4, 5))
        out = nn.forward(m, x)
        assert np.allclose(out, 0.5)

    def test_output_shape_and_range(self):
        m = nn.init_model([9, 4, 2], seed=2)
        x = np.random.default_rng(1).random((7, 9))
        out = nn.forward(m, x)
        assert out.shape == x.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_wrong_batch_width(self):
        m = nn.init_model([5, 3], seed=0)
        with pytest.raises(nn.ShapeError):
            nn.forward(m, np.zeros((2, 4)))

    def test_identity_capable_model_converges(self):
        # 2-2-2 widths, two interior points: reconstructions within 0.05
        points = np.array([[0.3, 0.7], [0.6, 0.2]])
        m = nn.init_model([2, 2], seed=4)
        m = nn.train_local(m, points, epochs=4000, batch_size=2, rng_seed=0)
        out = nn.forward(m, points)
        assert np.max(np.abs(out - points)) < 0.05


class TestReconstructionErrors:
    def test_exact_reproduction_is_zero(self):
        m = zero_model([3, 2])
        x = np.full((6, 3), 0.5)
        assert np.allclose(nn.reconstruction_errors(m, x), 0.0)

    def test_hand_arithmetic(self):
        # recon [0.5, 0.5] for x=[1, 0] -> mean sq err 0.25
        m = zero_model([2, 1])
        e = nn.reconstruction_errors(m, np.array([[1.0, 0.0]]))
        assert e.shape == (1,)
        assert abs(e[0] - 0.25) < 1e-15

    def test_matches_per_sample_loop_oracle(self):
        m = nn.init_model([6, 4, 3], seed=11)
        x = np.random.default_rng(2).random((10, 6))
        got = nn.reconstruction_errors(m, x)
        want = reference_errors(m, x)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_non_negative(self):
        m = nn.init_model([4, 2], seed=9)
        x = np.random.default_rng(3).random((20, 4))
        assert np.all(nn.reconstruction_errors(m, x) >= 0.0)

    def test_empty_input(self):
        m = nn.init_model([4, 2], seed=0)
        with pytest.raises(nn.EmptyInputError):
            nn.reconstruction_errors(m, np.zeros((0, 4)))


class TestBackward:
    @pytest.mark.parametrize("encoder,batch_n,seed", [
        ([3, 2], 1, 0),
        ([5, 4, 2], 3, 1),
        ([8, 5, 3], 4, 2),
        ([2, 2], 2, 3),
    ])
    def test_finite_difference_agreement(self, encoder, batch_n, seed):
        rng = np.random.default_rng(seed)
        m = nn.init_model(encoder, seed=seed)
        x = rng.random((batch_n, encoder[0]))
        got = nn.backward(m, x)
        want = numeric_gradient(m, x)
        denom = np.maximum(np.abs(want), 1e-8)
        assert np.max(np.abs(got - want) / denom) < 1e-4

    def test_duplicated_batch_same_gradient(self):
        m = nn.init_model([5, 3], seed=6)
        x = np.random.default_rng(4).random((3, 5))
        g1 = nn.backward(m, x)
        g2 = nn.backward(m, np.vstack([x, x]))
        assert np.allclose(g1, g2, atol=1e-15)

    def test_zero_weights_zero_inputs_closed_form(self):
        # single sigmoid layer, x = 0: weight grads vanish (a_prev = 0),
        # bias grads are 2*(0.5)*0.25/d = 0.25/d each
        d, n = 2, 3
        m = zero_model([d, d])  # widths (2, 2, 2); check first layer too
        m1 = nn.Model((d, d), np.zeros(d * d + d))
        g = nn.backward(m1, np.zeros((n, d)))
        w_grad, b_grad = g[:d * d], g[d * d:]
        assert np.allclose(w_grad, 0.0)
        assert np.allclose(b_grad, 0.25 / d)
        # deeper zero model on zero input: every gradient is zero except the
        # output bias (hidden activations are relu(0) = 0)
        g2 = nn.backward(m, np.zeros((n, d)))
        assert np.isfinite(g2).all()


class TestTrainLocal:
    def test_loss_decreases(self):
        rng = np.random.default_rng(7)
        center = rng.random(16)
        x = np.clip(center + 0.05 * rng.standard_normal((500, 16)), 0, 1)
        m = nn.init_model([16, 8, 4], seed=1)
        before = nn.mean_loss(m, x)
        trained = nn.train_local(m, x, epochs=20, batch_size=64, rng_seed=5)
        after = nn.mean_loss(trained, x)
        assert after < before

    def test_zero_epochs_rejected(self):
        m = nn.init_model([4, 2], seed=0)
        with pytest.raises(ValueError):
            nn.train_local(m, np.zeros((2, 4)), epochs=0)

    def test_bit_identical_given_seed(self):
        m = nn.init_model([6, 3], seed=2)
        x = np.random.default_rng(8).random((30, 6))
        a = nn.train_local(m, x, epochs=5, batch_size=8, rng_seed=42)
        b = nn.train_local(m, x, epochs=5, batch_size=8, rng_seed=42)
        assert a.params.tobytes() == b.params.tobytes()
        c = nn.train_local(m, x, epochs=5, batch_size=8, rng_seed=43)
        assert not np.array_equal(a.params, c.params)

    def test_input_model_unchanged(self):
        m = nn.init_model([4, 2], seed=0)
        snapshot = m.params.copy()
        nn.train_local(m, np.random.default_rng(1).random((10, 4)), epochs=2)
        assert np.array_equal(m.params, snapshot)

    def test_no_nonfinite_after_training(self):
        m = nn.init_model([8, 4], seed=3)
        x = np.random.default_rng(9).random((50, 8))
        t = nn.train_local(m, x, epochs=10, batch_size=16, rng_seed=0)
        assert np.isfinite(t.params).all()

    def test_divergence_detected(self):
        m = nn.init_model([4, 2], seed=0)
        poisoned = nn.Model(m.layer_sizes, np.full_like(m.params, np.nan))
        with pytest.raises(nn.TrainingDivergedError):
            nn.train_local(poisoned, np.random.default_rng(0).random((4, 4)),
                           epochs=1)


class TestFedavg:
    def scalar_model(self, w):
        return nn.Model((1, 1), np.array([float(w), 0.0]))

    def test_identical_models_idempotent(self):
        m = nn.init_model([4, 2], seed=5)
        avg = nn.fedavg([m, m], [0.3, 1.7])
        assert np.allclose(avg.params, m.params)

    def test_equal_weights(self):
        avg = nn.fedavg([self.scalar_model(0), self.scalar_model(2)], [1, 1])
        assert avg.params[0] == pytest.approx(1.0)

    def test_weighted_mean(self):
        avg = nn.fedavg([self.scalar_model(0), self.scalar_model(2)], [3, 1])
        assert avg.params[0] == pytest.approx(0.5)

    def test_linearity(self):
        rng = np.random.default_rng(10)
        models = [nn.Model((3, 2, 3), rng.standard_normal(3 * 2 + 2 + 2 * 3 + 3))
                  for _ in range(3)]
        w = [2.0, 3.0, 5.0]
        ab = nn.fedavg(models[:2], w[:2])
        nested = nn.fedavg([ab, models[2]], [w[0] + w[1], w[2]])
        flat = nn.fedavg(models, w)
        assert np.max(np.abs(nested.params - flat.params)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(nn.AggregationError):
            nn.fedavg([nn.init_model([4, 2], 0), nn.init_model([4, 3], 0)],
                      [1, 1])

    def test_zero_weight_sum(self):
        m = nn.init_model([4, 2], seed=0)
        with pytest.raises(nn.AggregationError):
            nn.fedavg([m, m], [0, 0])

    def test_empty_input(self):
        with pytest.raises(nn.AggregationError):
            nn.fedavg([], [])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = nn.init_model([6, 4, 2], seed=13)
        path = tmp_path / "model.fcrf"
        nn.save_model(m, path)
        back = nn.load_model(path)
        assert back.layer_sizes == m.layer_sizes
        assert back.params.tobytes() == m.params.tobytes()

    def test_header_layout(self, tmp_path):
        m = nn.init_model([3, 2], seed=0)
        path = tmp_path / "model.fcrf"
        nn.save_model(m, path)
        blob = path.read_bytes()
        assert blob[:4] == b"FCRF"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 3
        widths = np.frombuffer(blob[12:24], dtype="<u4")
        assert list(widths) == [3, 2, 3]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fcrf"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(nn.CheckpointError):
            nn.load_model(path)

    def test_truncated_payload(self, tmp_path):
        m = nn.init_model([3, 2], seed=0)
        path = tmp_path / "model.fcrf"
        nn.save_model(m, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(nn.CheckpointError):
            nn.load_model(path)
