import numpy as np
import pytest

from invexplain.autodiff import Tensor
from invexplain.datasets import Dataset, two_moons
from invexplain.layers import InvertibleBatchNorm
from invexplain.network import NetworkSpec, build_network
from invexplain.training import (
    DivergenceError,
    TrainConfig,
    cross_entropy,
    evaluate,
    finalize_running_stats,
    sgd_step,
    train,
)

from conftest import central_diff


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(np.log(2), abs=1e-7)

    def test_saturated(self):
        assert cross_entropy(Tensor([10.0, -10.0], dtype=np.float64), 0).item() < 1e-8

    def test_gradient(self, rng):
        y0 = rng.normal(size=(1, 4))
        y = Tensor(y0, requires_grad=True)
        cross_entropy(y, [2]).backward()
        p = np.exp(y0) / np.exp(y0).sum()
        onehot = np.eye(4)[2]
        np.testing.assert_allclose(y.grad[0], p[0] - onehot, atol=1e-6)
        fd = central_diff(lambda v: np.log(np.exp(v).sum()) - v[0, 2], y0)
        np.testing.assert_allclose(y.grad, fd, atol=1e-6)

    def test_label_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([0.0, 1.0]), 2)


class TestSGD:
    def step(self, p, g, lr, m, v=0.0):
        ps, vs = sgd_step([Tensor([p], dtype=np.float64)], [np.array([g])], [np.array([v])], lr, m)
        return ps[0].data[0], vs[0][0]

    def test_plain(self):
        assert self.step(1.0, 0.5, 0.1, 0.0)[0] == pytest.approx(0.95)

    def test_zero_grad_fixed_point(self):
        assert self.step(1.0, 0.0, 0.1, 0.0)[0] == 1.0

    def test_momentum_recurrence(self):
        p, v = self.step(0.0, 1.0, 1.0, 0.9)
        p, v = self.step(p, 1.0, 1.0, 0.9, v)
        assert p == pytest.approx(-2.9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step([Tensor([1.0, 2.0])], [np.ones(3)], [np.zeros(2)], 0.1, 0.0)


class TestEvaluate:
    def test_single_correct(self):
        net = build_network(NetworkSpec((2,), [1], 2))
        x = np.array([[0.3, 0.4]], dtype=np.float32)
        label = int(np.argmax(net(x).data))
        assert evaluate(net, Dataset(x, [label], 2))[0] == 1.0

    def test_ties_go_to_class_zero(self, rng):
        net = build_network(NetworkSpec((2,), [1], 2))
        net.head.params["A"] = Tensor(np.zeros((2, 2)), requires_grad=True)
        labels = np.array([0, 0, 0, 1, 1, 0, 1, 0, 1, 0])
        ds = Dataset(rng.normal(size=(10, 2)).astype(np.float32), labels, 2)
        assert evaluate(net, ds)[0] == pytest.approx(np.mean(labels == 0))

    def test_hand_count(self):
        net = build_network(NetworkSpec((2,), [1], 2, initial_bn=False, dtype="float64"))
        # zero-F block swaps the features; logits = (t0, t1) = (x1, x0)
        net.head.params["A"] = Tensor(np.eye(2), requires_grad=True)
        X = np.array([[0, 1], [1, 0], [2, 3], [3, 2], [0, -1], [-1, 0], [5, 4], [4, 5], [1, 2], [2, 1.0]])
        y = np.array([0, 1, 1, 1, 0, 0, 1, 0, 0, 0])
        # predicted class is 0 when x1 > x0 (ties -> 0)
        pred = np.where(X[:, 1] >= X[:, 0], 0, 1)
        assert evaluate(net, Dataset(X, y, 2))[0] == pytest.approx(np.mean(pred == y))
        assert evaluate(net, Dataset(X, y, 2))[0] == pytest.approx(0.7)

    def test_empty(self):
        net = build_network(NetworkSpec((2,), [1], 2))
        with pytest.raises(ValueError):
            evaluate(net, Dataset(np.zeros((0, 2)), [], 2))


@pytest.fixture(scope="module")
def moons():
    return two_moons(400, 0.1, seed=0)


class TestTrain:
    def test_deterministic(self, moons):
        cfg = TrainConfig(epochs=3, batch_size=32)
        a, b = build_network(NetworkSpec((2,), [4], 2)), build_network(NetworkSpec((2,), [4], 2))
        ra, rb = train(a, moons, cfg), train(b, moons, cfg)
        assert ra == rb
        assert all(np.array_equal(x, y) for x, y in zip(a.state_arrays(), b.state_arrays()))
        assert not a.training

    def test_learns(self, moons):
        net = build_network(NetworkSpec((2,), [8], 2))
        rep = train(net, moons, TrainConfig(epochs=30, batch_size=32))
        assert rep.final_train_accuracy > 0.9
        assert len(rep.epochs) == 30
        assert all(0 <= r["train_accuracy"] <= 1 for r in rep.epochs)

    def test_loss_descends_full_batch(self, moons):
        net = build_network(NetworkSpec((2,), [8], 2), seed=1)
        rng = np.random.default_rng(5)
        # give F non-zero output layers so every parameter receives gradient
        for m in net.modules():
            for k in ("w2",):
                if k in m.params:
                    m.params[k] = Tensor(rng.uniform(-0.3, 0.3, m.params[k].shape), requires_grad=True)
        from invexplain.training import SGD
        opt = SGD(net, momentum=0.0)
        net.train()
        losses = []
        for _ in range(6):
            loss = cross_entropy(net(moons.features), moons.labels)
            losses.append(loss.item())
            loss.backward()
            opt.step(1e-3)
        assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:]))

    def test_empty_and_bad_config(self, moons):
        net = build_network(NetworkSpec((2,), [2], 2))
        with pytest.raises(ValueError):
            train(net, Dataset(np.zeros((0, 2)), [], 2), TrainConfig(epochs=1))
        with pytest.raises(ValueError):
            train(net, moons, TrainConfig(batch_size=1))
        with pytest.raises(ValueError):
            train(net, moons, TrainConfig(learning_rate=0.0))

    def test_divergence(self, moons):
        net = build_network(NetworkSpec((2,), [4], 2))
        with pytest.raises(DivergenceError):
            train(net, moons, TrainConfig(epochs=5, learning_rate=1e30))

    def test_finalize_sets_average_stats(self, moons):
        net = build_network(NetworkSpec((2,), [2], 2, dtype="float64"))
        finalize_running_stats(net, moons, batch_size=400)
        bn = net.layers[0]
        assert isinstance(bn, InvertibleBatchNorm)
        np.testing.assert_allclose(bn.buffers["running_mean"], moons.features.mean(axis=0), rtol=1e-6)
        np.testing.assert_allclose(bn.buffers["running_var"], moons.features.var(axis=0), rtol=1e-5)
        assert bn.momentum == 0.1 and not net.training

    def test_step_schedule(self):
        cfg = TrainConfig(learning_rate=1.0, lr_schedule="step", lr_decay=0.5, lr_every=2)
        assert [cfg.lr_at(e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]

    def test_report_lines(self, moons):
        net = build_network(NetworkSpec((2,), [2], 2))
        rep = train(net, moons, TrainConfig(epochs=2), eval_dataset=moons)
        lines = rep.to_lines()
        assert len(lines) == 3
        assert lines[0].startswith("epoch=1 ")
        assert "eval_accuracy=" in lines[1]
