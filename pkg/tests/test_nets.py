import numpy as np
import pytest

from stitchsim import nets
from stitchsim.errors import TrainingDivergedError


def small_net(widths=(3, 5, 4, 2), seed=0):
    return nets.init_net(list(widths), seed=seed)


def random_batch(net, n=6, seed=0):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, net.layer_width(0)))
    y = r.integers(0, net.num_classes, n)
    return x, y


def params_snapshot(net):
    return [p.copy() for p in net.parameters()]


def params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def fd_grad(loss_fn, arr, step=1e-5):
    """Central finite differences of a scalar function w.r.t. an array."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        hi = loss_fn()
        arr[idx] = orig - step
        lo = loss_fn()
        arr[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


class TestInit:
    def test_deterministic(self):
        a, b = small_net(seed=7), small_net(seed=7)
        assert params_equal(a.parameters(), b.parameters())

    def test_single_linear_layer(self):
        net = nets.init_net([4, 4], seed=0)
        assert net.num_layers == 1
        assert net.layers[0].nonlinearity == "identity"

    def test_forward_finite(self):
        net = small_net(seed=3)
        x, _ = random_batch(net, seed=3)
        assert np.all(np.isfinite(net.forward(x)))

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            nets.init_net([3, 0, 2])

    def test_too_few_widths_rejected(self):
        with pytest.raises(ValueError):
            nets.init_net([3])


class TestForward:
    def test_forward_to_zero_is_identity(self):
        net = small_net()
        x, _ = random_batch(net)
        assert np.array_equal(net.forward_to(0, x), x)

    def test_forward_to_last_is_full_forward(self):
        net = small_net()
        x, _ = random_batch(net)
        assert np.array_equal(net.forward_to(net.num_layers, x), net.forward(x))

    def test_forward_from_zero_is_full_forward(self):
        net = small_net()
        x, _ = random_batch(net)
        assert np.array_equal(net.forward_from(0, x), net.forward(x))

    def test_forward_from_last_is_identity_on_logits(self):
        net = small_net()
        logits = np.random.default_rng(1).standard_normal((4, net.num_classes))
        assert np.array_equal(net.forward_from(net.num_layers, logits), logits)

    def test_composition_identity_every_split(self):
        net = small_net(seed=5)
        x, _ = random_batch(net, seed=5)
        full = net.forward(x)
        for i in range(net.num_layers + 1):
            composed = net.forward_from(i, net.forward_to(i, x))
            assert np.allclose(composed, full, atol=1e-12)

    def test_index_out_of_range(self):
        net = small_net()
        x, _ = random_batch(net)
        with pytest.raises(IndexError):
            net.forward_to(net.num_layers + 1, x)


class TestGradWrtIntermediate:
    def test_zero_width_tail_closed_form(self):
        net = small_net()
        r = np.random.default_rng(2)
        a = r.standard_normal((5, net.num_classes))
        y = r.integers(0, net.num_classes, 5)
        g = net.grad_wrt_intermediate(net.num_layers, a, y)
        onehot = np.zeros((5, net.num_classes))
        onehot[np.arange(5), y] = 1.0
        assert np.allclose(g, nets.softmax(a) - onehot, atol=1e-12)

    def test_matches_finite_differences(self):
        net = small_net(seed=11)
        r = np.random.default_rng(12)
        for i in range(net.num_layers + 1):
            a = r.standard_normal((4, net.layer_width(i)))
            y = r.integers(0, net.num_classes, 4)
            g = net.grad_wrt_intermediate(i, a, y)

            def loss():
                logits = net.forward_from(i, a)
                shifted = logits - logits.max(axis=1, keepdims=True)
                lse = np.log(np.exp(shifted).sum(axis=1))
                return float(np.sum(lse - shifted[np.arange(len(y)), y]))

            fd = fd_grad(loss, a)
            assert np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12) < 1e-5

    def test_duplicated_batch_doubles_sum_gradient(self):
        net = small_net(seed=13)
        r = np.random.default_rng(14)
        a = r.standard_normal((3, net.layer_width(1)))
        y = r.integers(0, net.num_classes, 3)
        g1 = net.grad_wrt_intermediate(1, a, y)
        g2 = net.grad_wrt_intermediate(1, np.vstack([a, a]), np.concatenate([y, y]))
        assert np.allclose(g2[:3], g1, atol=1e-12)
        assert np.allclose(g2.sum(axis=0), 2 * g1.sum(axis=0), atol=1e-10)

    def test_parameters_untouched(self):
        net = small_net(seed=15)
        before = params_snapshot(net)
        a, y = random_batch(net, seed=15)
        net.grad_wrt_intermediate(0, a, y)
        assert params_equal(before, net.parameters())

    def test_width_mismatch(self):
        net = small_net()
        with pytest.raises(ValueError):
            net.grad_wrt_intermediate(1, np.zeros((2, 99)), np.zeros(2, dtype=int))


class TestParameterGradients:
    def test_weights_and_biases_match_finite_differences(self):
        net = small_net(seed=21)
        x, y = random_batch(net, n=5, seed=22)

        def mean_loss():
            return nets.cross_entropy(net.forward(x), y)

        acts, pres = net._forward_cached(0, x)
        dlogits = (nets.softmax(acts[-1]) - np.eye(net.num_classes)[y]) / len(y)
        grads, _ = net._backward(0, acts, pres, dlogits)
        for k, layer in enumerate(net.layers):
            dw, db = grads[k]
            assert np.linalg.norm(dw - fd_grad(mean_loss, layer.w)) / max(np.linalg.norm(dw), 1e-12) < 1e-4
            assert np.linalg.norm(db - fd_grad(mean_loss, layer.b)) / max(np.linalg.norm(db), 1e-12) < 1e-4


class TestTrain:
    def blobs(self, seed=0, n=200):
        r = np.random.default_rng(seed)
        half = n // 2
        x = np.vstack([r.standard_normal((half, 2)) + [5, 0],
                       r.standard_normal((n - half, 2)) - [5, 0]])
        y = np.array([0] * half + [1] * (n - half))
        return nets.LabeledDataset(x, y, 2)

    def test_zero_epochs_leaves_parameters(self):
        net = small_net(seed=31)
        before = params_snapshot(net)
        ds = nets.LabeledDataset(np.random.default_rng(0).standard_normal((10, 3)),
                                 np.zeros(10, dtype=int), 2)
        nets.train(net, ds, nets.TrainConfig(epochs=0))
        assert params_equal(before, net.parameters())

    def test_learns_separable_blobs(self):
        ds = self.blobs(seed=1)
        net = nets.init_net([2, 8, 2], seed=2)
        nets.train(net, ds, nets.TrainConfig(epochs=200, batch_size=50, seed=3))
        assert nets.accuracy(net, ds) >= 0.99

    def test_same_seed_identical_parameters(self):
        ds = self.blobs(seed=4)
        runs = []
        for _ in range(2):
            net = nets.init_net([2, 6, 2], seed=5)
            nets.train(net, ds, nets.TrainConfig(epochs=10, seed=6))
            runs.append(params_snapshot(net))
        assert params_equal(*runs)

    def test_full_batch_small_lr_never_increases_loss(self):
        r = np.random.default_rng(40)
        for trial in range(20):
            widths = [3, int(r.integers(2, 6)), 2]
            net = nets.init_net(widths, seed=100 + trial)
            x = r.standard_normal((12, 3))
            y = r.integers(0, 2, 12)
            ds = nets.LabeledDataset(x, y, 2)
            before = nets.cross_entropy(net.forward(x), y)
            nets.train(net, ds, nets.TrainConfig(epochs=1, batch_size=12,
                                                 learning_rate=1e-4, optimizer="sgd"))
            after = nets.cross_entropy(net.forward(x), y)
            assert after <= before + 1e-12

    def test_decoupled_weight_decay_step(self):
        net = nets.init_net([2, 2], seed=50)
        w0 = net.layers[0].w.copy()
        ds = nets.LabeledDataset(np.ones((4, 2)), np.zeros(4, dtype=int), 2)
        cfg = nets.TrainConfig(epochs=1, batch_size=4, learning_rate=0.1,
                               weight_decay=0.5, optimizer="sgd")
        acts, pres = net._forward_cached(0, ds.inputs)
        dlogits = (nets.softmax(acts[-1]) - np.eye(2)[ds.labels]) / 4
        (dw, _), _ = net._backward(0, acts, pres, dlogits)[0][0], None
        nets.train(net, ds, cfg)
        assert np.allclose(net.layers[0].w, w0 - 0.1 * (dw + 0.5 * w0), atol=1e-12)

    def test_frozen_net_rejected(self):
        net = small_net().freeze()
        ds = self.blobs()
        with pytest.raises(ValueError):
            nets.train(net, ds, nets.TrainConfig(epochs=1))

    def test_divergence_aborts(self):
        ds = self.blobs(seed=7)
        net = nets.init_net([2, 8, 2], seed=8)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingDivergedError):
            nets.train(net, ds, nets.TrainConfig(epochs=50, learning_rate=1e8,
                                                 optimizer="sgd"))

    def test_log_records_every_epoch(self):
        ds = self.blobs(seed=9)
        net = nets.init_net([2, 4, 2], seed=10)
        log = nets.train(net, ds, nets.TrainConfig(epochs=5, seed=11))
        assert len(log.losses) == 5 and len(log.accuracies) == 5


class TestAccuracy:
    def test_one_hot_logits(self):
        net = nets.init_net([3, 3], seed=60)
        net.layers[0].w[:] = np.eye(3)
        net.layers[0].b[:] = 0.0
        labels = np.array([0, 1, 2, 1])
        ds = nets.LabeledDataset(np.eye(3)[labels], labels, 3)
        assert nets.accuracy(net, ds) == 1.0

    def test_adversarial_permutation(self):
        net = nets.init_net([3, 3], seed=61)
        net.layers[0].w[:] = np.eye(3)
        net.layers[0].b[:] = 0.0
        labels = np.array([0, 1, 2])
        ds = nets.LabeledDataset(np.eye(3)[(labels + 1) % 3], labels, 3)
        assert nets.accuracy(net, ds) == 0.0

    def test_chance_band_random_net(self):
        r = np.random.default_rng(62)
        net = nets.init_net([4, 8, 3], seed=63)
        ds = nets.LabeledDataset(r.standard_normal((3000, 4)), r.integers(0, 3, 3000), 3)
        assert 0.25 <= nets.accuracy(net, ds) <= 0.42

    def test_argmax_ties_break_to_lowest_class(self):
        net = nets.init_net([2, 3], seed=64)
        net.layers[0].w[:] = 0.0
        net.layers[0].b[:] = 0.0
        labels = np.array([0, 1, 2, 0])
        ds = nets.LabeledDataset(np.ones((4, 2)), labels, 3)
        assert nets.accuracy(net, ds) == 0.5  # all predictions are class 0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = small_net(seed=70)
        path = tmp_path / "net.bin"
        net.save(path)
        loaded = nets.FeedforwardNet.load(path)
        assert loaded.widths == net.widths
        assert params_equal(net.parameters(), loaded.parameters())
        assert [l.nonlinearity for l in loaded.layers] == [l.nonlinearity for l in net.layers]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            nets.FeedforwardNet.load(path)


class TestDataset:
    def test_split_deterministic_and_disjoint(self):
        r = np.random.default_rng(80)
        ds = nets.LabeledDataset(r.standard_normal((40, 2)), r.integers(0, 2, 40), 2)
        a1, b1 = ds.split(0.25, seed=1)
        a2, b2 = ds.split(0.25, seed=1)
        assert np.array_equal(a1.inputs, a2.inputs)
        assert b1.n == 10 and a1.n == 30
        assert np.array_equal(np.sort(np.concatenate([a1.labels, b1.labels])), np.sort(ds.labels))

    def test_label_validation(self):
        with pytest.raises(ValueError):
            nets.LabeledDataset(np.ones((3, 2)), np.array([0, 1, 5]), 2)
