import numpy as np
import pytest

from melodyadapt import nn


def make_net(*specs):
    layers = [layer for _, layer in specs]
    names = [name for name, _ in specs]
    return nn.Network(layers=layers, names=names)


def rand_input(rng, shape):
    return rng.standard_normal(shape).astype(np.float32)


class TestForwardBasics:
    def test_relu(self):
        net = make_net(("r", nn.ReLU()))
        params = net.init_params(np.random.default_rng(0), (3,))
        y, _ = nn.forward(net, params, np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])

    def test_softmax_uniform_on_zero_logits(self):
        c, m = 11, 4
        net = make_net(("s", nn.SoftmaxPerFrame()))
        params = net.init_params(np.random.default_rng(0), (c, m))
        y, _ = nn.forward(net, params, np.zeros((c, m)))
        np.testing.assert_allclose(y, np.full((c, m), 1.0 / c), atol=1e-12)

    def test_softmax_columns_sum_to_one(self):
        rng = np.random.default_rng(3)
        net = make_net(("s", nn.SoftmaxPerFrame()))
        params = nn.ParameterSet()
        y, _ = nn.forward(net, params, rng.standard_normal((506, 20)) * 10)
        np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-6)

    def test_dense_identity(self):
        net = make_net(("d", nn.DensePerFrame(4)))
        params = net.init_params(np.random.default_rng(0), (4, 6))
        params.tensors["d"]["weight"] = np.eye(4, dtype=np.float32)
        params.tensors["d"]["bias"] = np.zeros(4, dtype=np.float32)
        x = rand_input(np.random.default_rng(1), (4, 6))
        y, _ = nn.forward(net, params, x)
        np.testing.assert_allclose(y, x, atol=1e-7)

    def test_sigmoid_range_and_extremes(self):
        net = make_net(("g", nn.Sigmoid()))
        y, _ = nn.forward(net, nn.ParameterSet(), np.array([-100.0, 0.0, 100.0]))
        assert 0.0 < y[0] < 1e-6
        assert y[1] == pytest.approx(0.5)
        assert 1.0 - 1e-6 < y[2] <= 1.0

    def test_shape_mismatch_raises(self):
        net = make_net(("c", nn.Conv2D(2, (3, 3))))
        params = net.init_params(np.random.default_rng(0), (1, 8, 8))
        with pytest.raises(ValueError):
            nn.forward(net, params, np.zeros((2, 8, 8)))

    def test_determinism(self):
        rng_shape = (1, 16, 12)
        net = make_net(
            ("c", nn.Conv2D(3, (3, 3))),
            ("b", nn.BatchNorm()),
            ("r", nn.ReLU()),
            ("p", nn.FreqPool(4)),
            ("d", nn.DensePerFrame(5)),
        )
        x = rand_input(np.random.default_rng(42), rng_shape)
        outs = []
        for _ in range(2):
            params = net.init_params(np.random.default_rng(7), rng_shape)
            y, _ = nn.forward(net, params, x)
            outs.append(y)
        assert np.array_equal(outs[0], outs[1])


class TestFreqPool:
    def test_non_overlapping_max(self):
        net = make_net(("p", nn.FreqPool(2)))
        x = np.arange(12, dtype=np.float32).reshape(1, 6, 2)
        y, _ = nn.forward(net, nn.ParameterSet(), x)
        assert y.shape == (1, 3, 2)
        np.testing.assert_array_equal(y[0, :, 0], [2.0, 6.0, 10.0])

    def test_remainder_bins_dropped(self):
        net = make_net(("p", nn.FreqPool(4)))
        x = np.zeros((1, 513, 3), dtype=np.float32)
        x[0, 512, :] = 99.0  # lives in the dropped remainder
        y, _ = nn.forward(net, nn.ParameterSet(), x)
        assert y.shape == (1, 128, 3)
        assert y.max() == 0.0

    def test_global_pool(self):
        net = make_net(("p", nn.FreqPool(0)))
        x = rand_input(np.random.default_rng(0), (3, 7, 5))
        y, _ = nn.forward(net, nn.ParameterSet(), x)
        assert y.shape == (3, 1, 5)
        np.testing.assert_array_equal(y[:, 0, :], x.max(axis=1))


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        net = make_net(("b", nn.BatchNorm()))
        params = net.init_params(np.random.default_rng(0), (2, 8, 10))
        x = rand_input(np.random.default_rng(1), (2, 8, 10)) * 3 + 1
        y, _ = nn.forward(net, params, x, train=True)
        np.testing.assert_allclose(y.mean(axis=(1, 2)), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.std(axis=(1, 2)), 1.0, atol=1e-3)

    def test_inference_uses_running_stats(self):
        net = make_net(("b", nn.BatchNorm()))
        params = net.init_params(np.random.default_rng(0), (1, 4, 4))
        x = rand_input(np.random.default_rng(2), (1, 4, 4))
        y_eval_fresh, _ = nn.forward(net, params, x, train=False)
        # Fresh running stats are (0, 1): eval output equals the input.
        np.testing.assert_allclose(y_eval_fresh, x, atol=1e-4)
        for _ in range(200):
            nn.forward(net, params, x, train=True)
        y_eval, _ = nn.forward(net, params, x, train=False)
        y_train, _ = nn.forward(net, params, x, train=True)
        # After convergence of the running stats both modes agree.
        np.testing.assert_allclose(y_eval, y_train, atol=1e-3)
        assert not np.allclose(y_eval, y_eval_fresh, atol=1e-3)


def wce_like_loss(target_col):
    """Cross-entropy-style loss over softmaxed columns for grad checks."""

    def fn(out):
        p = np.clip(out, 1e-12, None)
        loss = -np.log(p[target_col, :]).sum()
        d = np.zeros_like(out)
        d[target_col, :] = -1.0 / p[target_col, :]
        return loss, d

    return fn


class TestGradients:
    """Central finite differences are the oracle for every backward pass."""

    def test_dense_mse(self):
        rng = np.random.default_rng(0)
        net = make_net(("d", nn.DensePerFrame(3)))
        params = net.init_params(rng, (5, 4))
        x = rand_input(rng, (5, 4))
        target = rng.standard_normal((3, 4))
        err = nn.grad_check(net, params, nn.mse_loss_fn(target), x)
        assert err < 1e-5

    def test_conv_single_filter(self):
        rng = np.random.default_rng(1)
        net = make_net(("c", nn.Conv2D(1, (3, 3))))
        params = net.init_params(rng, (1, 6, 7))
        x = rand_input(rng, (1, 6, 7))
        err = nn.grad_check(net, params, nn.sum_loss_fn(), x, step=1e-3)
        assert err < 1e-4

    def test_relu_away_from_kinks(self):
        rng = np.random.default_rng(2)
        net = make_net(("r", nn.ReLU()))
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 0.1] = 0.5  # keep clear of the kink
        target = rng.standard_normal((4, 5))
        err = nn.grad_check(net, nn.ParameterSet(), nn.mse_loss_fn(target), x)
        assert err < 1e-5

    @pytest.mark.parametrize("factor", [2, 0])
    def test_freq_pool(self, factor):
        rng = np.random.default_rng(3)
        net = make_net(("p", nn.FreqPool(factor)))
        x = rng.permutation(np.arange(60.0)).reshape(2, 6, 5) / 10.0  # distinct: unique argmax
        target = rng.standard_normal(net.out_shape((2, 6, 5)))
        err = nn.grad_check(net, nn.ParameterSet(), nn.mse_loss_fn(target), x.astype(np.float64))
        assert err < 1e-5

    def test_batch_norm_train_mode(self):
        rng = np.random.default_rng(4)
        net = make_net(("b", nn.BatchNorm()))
        params = net.init_params(rng, (3, 4, 5))
        x = rand_input(rng, (3, 4, 5))
        target = rng.standard_normal((3, 4, 5))
        err = nn.grad_check(net, params, nn.mse_loss_fn(target), x, train=True)
        assert err < 1e-4

    def test_batch_norm_eval_mode(self):
        rng = np.random.default_rng(5)
        net = make_net(("b", nn.BatchNorm()))
        params = net.init_params(rng, (3, 4, 5))
        params.tensors["b"]["running_mean"] = rng.standard_normal(3).astype(np.float32)
        params.tensors["b"]["running_var"] = rng.uniform(0.5, 2.0, 3).astype(np.float32)
        x = rand_input(rng, (3, 4, 5))
        target = rng.standard_normal((3, 4, 5))
        err = nn.grad_check(net, params, nn.mse_loss_fn(target), x, train=False)
        assert err < 1e-5

    def test_sigmoid(self):
        rng = np.random.default_rng(6)
        net = make_net(("g", nn.Sigmoid()))
        x = rng.standard_normal((4, 6))
        target = rng.uniform(0, 1, (4, 6))
        err = nn.grad_check(net, nn.ParameterSet(), nn.mse_loss_fn(target), x)
        assert err < 1e-5

    def test_softmax(self):
        rng = np.random.default_rng(7)
        net = make_net(("s", nn.SoftmaxPerFrame()))
        x = rng.standard_normal((6, 3))
        err = nn.grad_check(net, nn.ParameterSet(), wce_like_loss(2), x)
        assert err < 1e-5

    def test_full_chain(self):
        rng = np.random.default_rng(8)
        shape = (1, 12, 6)
        net = make_net(
            ("c1", nn.Conv2D(2, (3, 3))),
            ("b1", nn.BatchNorm()),
            ("r1", nn.ReLU()),
            ("p1", nn.FreqPool(3)),
            ("c2", nn.Conv2D(3, (3, 3))),
            ("r2", nn.ReLU()),
            ("pg", nn.FreqPool(0)),
            ("d", nn.DensePerFrame(5)),
            ("s", nn.SoftmaxPerFrame()),
        )
        params = net.init_params(rng, shape)
        x = rand_input(rng, shape) + 0.3
        err = nn.grad_check(net, params, wce_like_loss(1), x, train=True)
        assert err < 1e-4

    def test_fused_softmax_ce_identity(self):
        # Analytic identity: d(CE(softmax(z)))/dz == p - onehot.
        rng = np.random.default_rng(9)
        z = rng.standard_normal((7, 4))
        sm = nn.SoftmaxPerFrame()
        p, cache = sm.forward(z, {}, False)
        true_class = 3
        d_p = np.zeros_like(p)
        d_p[true_class, :] = -1.0 / p[true_class, :]
        d_z, _ = sm.backward(d_p, cache, {})
        onehot = np.zeros_like(p)
        onehot[true_class, :] = 1.0
        np.testing.assert_allclose(d_z, p - onehot, atol=1e-10)

    def test_zero_output_gradient_gives_zero_grads(self):
        rng = np.random.default_rng(10)
        net = make_net(("c", nn.Conv2D(2, (3, 3))), ("d", nn.DensePerFrame(3)))
        params = net.init_params(rng, (1, 4, 5))
        x = rand_input(rng, (1, 4, 5))
        _, tape = nn.forward(net, params, x)
        _, grads = nn.backward(tape, np.zeros((3, 5)), params)
        for layer_grads in grads.values():
            for g in layer_grads.values():
                assert np.all(g == 0.0)

    def test_frozen_layers_get_no_gradient(self):
        rng = np.random.default_rng(11)
        net = make_net(("d1", nn.DensePerFrame(4)), ("d2", nn.DensePerFrame(2)))
        params = net.init_params(rng, (3, 5))
        params.trainable["d1"] = False
        x = rand_input(rng, (3, 5))
        _, tape = nn.forward(net, params, x)
        _, grads = nn.backward(tape, np.ones((2, 5)), params)
        assert "d1" not in grads and "d2" in grads

    def test_randomized_instances_all_layer_kinds(self):
        # 20 random small chains; the acceptance suite runs the full 100.
        rng = np.random.default_rng(12)
        for trial in range(20):
            shape = (1, int(rng.integers(6, 10)), int(rng.integers(4, 8)))
            net = make_net(
                ("c", nn.Conv2D(int(rng.integers(1, 3)), (3, 3))),
                ("b", nn.BatchNorm()),
                ("r", nn.ReLU()),
                ("p", nn.FreqPool(0)),
                ("d", nn.DensePerFrame(int(rng.integers(2, 5)))),
            )
            params = net.init_params(rng, shape)
            x = rng.standard_normal(shape) + 0.2
            target = rng.standard_normal(net.out_shape(shape))
            err = nn.grad_check(net, params, nn.mse_loss_fn(target), x, rng=rng)
            assert err < 1e-4, f"trial {trial}: {err}"


class TestSgd:
    def setup_method(self):
        self.net = make_net(("d", nn.DensePerFrame(2)))
        self.params = self.net.init_params(np.random.default_rng(0), (3, 1))

    def test_zero_lr_keeps_params(self):
        before = self.params.copy()
        grads = {"d": {"weight": np.ones((2, 3)), "bias": np.ones(2)}}
        nn.sgd_step(self.params, grads, 0.0)
        np.testing.assert_array_equal(self.params.tensors["d"]["weight"], before.tensors["d"]["weight"])

    def test_scalar_arithmetic(self):
        self.params.tensors["d"]["weight"][0, 0] = 1.0
        grads = {"d": {"weight": np.zeros((2, 3)), "bias": np.zeros(2)}}
        grads["d"]["weight"][0, 0] = 2.0
        nn.sgd_step(self.params, grads, 0.1)
        assert self.params.tensors["d"]["weight"][0, 0] == pytest.approx(0.8)

    def test_frozen_tensor_unchanged(self):
        self.params.trainable["d"] = False
        before = self.params.copy()
        grads = {"d": {"weight": np.ones((2, 3)), "bias": np.ones(2)}}
        nn.sgd_step(self.params, grads, 0.5)
        np.testing.assert_array_equal(self.params.tensors["d"]["weight"], before.tensors["d"]["weight"])

    def test_non_finite_gradient_raises(self):
        grads = {"d": {"weight": np.full((2, 3), np.nan), "bias": np.zeros(2)}}
        with pytest.raises(nn.DivergenceError):
            nn.sgd_step(self.params, grads, 0.1)


class TestWeightsIO:
    def make_models(self, seed=0):
        net = make_net(
            ("c", nn.Conv2D(2, (3, 3))),
            ("b", nn.BatchNorm()),
            ("d", nn.DensePerFrame(4)),
        )
        params = net.init_params(np.random.default_rng(seed), (1, 8, 5))
        return net, params

    def test_round_trip_bit_exact(self, tmp_path):
        net, params = self.make_models()
        path = tmp_path / "w.bin"
        nn.save_weights(path, {"base": (net, params)}, extra={"preset": "desk"})
        loaded, extra = nn.load_weights(path, expected={"base": net})
        assert extra == {"preset": "desk"}
        for name, tensors in params.tensors.items():
            for key, arr in tensors.items():
                assert np.array_equal(loaded["base"].tensors[name][key], arr)
        assert loaded["base"].trainable == params.trainable

    def test_manifest_mismatch(self, tmp_path):
        net, params = self.make_models()
        path = tmp_path / "w.bin"
        nn.save_weights(path, {"base": (net, params)})
        other = make_net(
            ("c", nn.Conv2D(3, (3, 3))),  # wrong filter count
            ("b", nn.BatchNorm()),
            ("d", nn.DensePerFrame(4)),
        )
        with pytest.raises(nn.WeightFormatError, match="mismatch"):
            nn.load_weights(path, expected={"base": other})

    def test_truncated_file(self, tmp_path):
        net, params = self.make_models()
        path = tmp_path / "w.bin"
        nn.save_weights(path, {"base": (net, params)})
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(nn.WeightFormatError, match="truncated"):
            nn.load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"NOTAWEIGHTFILE----")
        with pytest.raises(nn.WeightFormatError, match="magic"):
            nn.load_weights(path)

    def test_checksum_detects_mutation(self):
        _, params = self.make_models()
        before = params.checksum()
        assert params.checksum() == before
        params.tensors["d"]["bias"][0] += 1e-3
        assert params.checksum() != before
