import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invexplain import autodiff as ad
from invexplain.autodiff import Tensor

from conftest import central_diff, rel_err


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_conv(x, k, b):
    N, C, H, W = x.shape
    O, _, s, _ = k.shape
    p = s // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((N, O, H, W))
    for n in range(N):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(C):
                        for di in range(s):
                            for dj in range(s):
                                acc += xp[n, c, i + di, j + dj] * k[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


class TestElementwise:
    def test_add(self):
        assert ad.add(f64([1, 2]), f64([3, 4])).data.tolist() == [4, 6]

    def test_relu(self):
        assert ad.relu(f64([-1, 0, 2])).data.tolist() == [0, 0, 2]

    def test_mul_and_fd(self):
        assert ad.mul(f64([2, 3]), f64([0, 5])).data.tolist() == [0, 15]
        rng = np.random.default_rng(0)
        a0, b0 = rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 5)
        a, b = f64(a0, True), f64(b0, True)
        ad.sum_all(ad.mul(a, b)).backward()
        ga = central_diff(lambda v: np.sum(v * b0), a0)
        gb = central_diff(lambda v: np.sum(a0 * v), b0)
        assert rel_err(a.grad, ga) < 1e-4
        assert rel_err(b.grad, gb) < 1e-4

    def test_dispatch(self):
        a = f64([1.0, -2.0])
        assert ad.elementwise("scale", a, 3.0).data.tolist() == [3.0, -6.0]
        assert ad.elementwise("sub", a, a).data.tolist() == [0.0, 0.0]
        assert ad.elementwise("relu", a).data.tolist() == [1.0, 0.0]
        with pytest.raises(ValueError):
            ad.elementwise("pow", a, a)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.add(f64([1, 2]), f64([1, 2, 3]))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_rejected(self):
        with pytest.raises(ad.NonFiniteError):
            f64([1.0, np.nan])
        with pytest.raises(ad.NonFiniteError):
            ad.scale(f64([1.0]), np.inf)
        with pytest.raises(ad.NonFiniteError):
            ad.scale(f64([1e300]), 1e300)

    def test_inputs_not_mutated(self):
        a = f64([1.0, -1.0], True)
        before = a.data.copy()
        ad.sum_all(ad.relu(ad.scale(a, 2.0))).backward()
        np.testing.assert_array_equal(a.data, before)
        assert not a.data.flags.writeable


class TestMatmul:
    def test_identity(self):
        m = f64([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ad.matmul(f64(np.eye(2)), m).data, m.data)

    def test_hand(self):
        assert ad.matmul(f64([[1, 2]]), f64([[3], [4]])).data.tolist() == [[11]]

    def test_dims(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))

    def test_fd(self, rng):
        a0, b0 = rng.uniform(-2, 2, (5, 4)), rng.uniform(-2, 2, (4, 3))
        c = rng.uniform(-1, 1, (5, 3))
        a, b = f64(a0, True), f64(b0, True)
        ad.sum_all(ad.mul(ad.matmul(a, b), f64(c))).backward()
        assert rel_err(a.grad, central_diff(lambda v: np.sum((v @ b0) * c), a0)) < 1e-6
        assert rel_err(b.grad, central_diff(lambda v: np.sum((a0 @ v) * c), b0)) < 1e-6


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        y = ad.conv2d(f64(x), f64(np.ones((1, 1, 1, 1))), f64([0.0]))
        np.testing.assert_array_equal(y.data, x)

    def test_ones_kernel_interior(self):
        y = ad.conv2d(f64(np.full((1, 1, 5, 5), 1.5)), f64(np.ones((1, 1, 3, 3))), f64([0.0]))
        assert y.data[0, 0, 2, 2] == pytest.approx(13.5)

    def test_naive_loop(self, rng):
        x, k, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
        y = ad.conv2d(f64(x), f64(k), f64(b))
        np.testing.assert_allclose(y.data, naive_conv(x, k, b), atol=1e-6)

    def test_errors(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(f64(np.ones((1, 2, 4, 4))), f64(np.ones((1, 3, 3, 3))), f64([0.0]))
        with pytest.raises(ad.ShapeError):
            ad.conv2d(f64(np.ones((1, 2, 4, 4))), f64(np.ones((1, 2, 5, 5))), f64([0.0]))

    @pytest.mark.parametrize("ksize", [1, 3])
    def test_fd(self, rng, ksize):
        x0 = rng.uniform(-2, 2, (2, 2, 4, 4))
        k0 = rng.uniform(-2, 2, (3, 2, ksize, ksize))
        b0 = rng.uniform(-2, 2, 3)
        c = rng.uniform(-1, 1, (2, 3, 4, 4))
        x, k, b = f64(x0, True), f64(k0, True), f64(b0, True)
        ad.sum_all(ad.mul(ad.conv2d(x, k, b), f64(c))).backward()
        obj = lambda xx, kk, bb: np.sum(naive_conv(xx, kk, bb) * c)
        assert rel_err(x.grad, central_diff(lambda v: obj(v, k0, b0), x0)) < 1e-6
        assert rel_err(k.grad, central_diff(lambda v: obj(x0, v, b0), k0)) < 1e-6
        assert rel_err(b.grad, central_diff(lambda v: obj(x0, k0, v), b0)) < 1e-6


class TestChannelStats:
    def test_constant(self):
        m, v = ad.channel_stats(f64(np.full((3, 1, 2, 2), 7.0)))
        assert m.data.tolist() == [7.0] and v.data.tolist() == [0.0]

    def test_two_points(self):
        m, v = ad.channel_stats(f64([[1.0], [3.0]]))
        assert m.data.tolist() == [2.0] and v.data.tolist() == [1.0]

    def test_two_pass_reference(self, rng):
        x = rng.normal(size=(8, 3, 4, 4))
        m, v = ad.channel_stats(f64(x))
        for c in range(3):
            vals = x[:, c].ravel()
            mean = sum(vals) / len(vals)
            var = sum((u - mean) ** 2 for u in vals) / len(vals)
            assert m.data[c] == pytest.approx(mean, abs=1e-6)
            assert v.data[c] == pytest.approx(var, abs=1e-6)

    def test_empty(self):
        with pytest.raises(ad.ShapeError):
            ad.channel_stats(f64(np.zeros((0, 2))))

    def test_fd(self, rng):
        x0 = rng.uniform(-2, 2, (3, 2, 2, 2))
        cm, cv = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        x = f64(x0, True)
        m, v = ad.channel_stats(x)
        ad.add(ad.sum_all(ad.mul(m, f64(cm))), ad.sum_all(ad.mul(v, f64(cv)))).backward()

        def obj(xx):
            return np.sum(xx.mean(axis=(0, 2, 3)) * cm) + np.sum(xx.var(axis=(0, 2, 3)) * cv)

        assert rel_err(x.grad, central_diff(obj, x0)) < 1e-6


class TestOtherOps:
    def test_channel_affine_fd(self, rng):
        x0, s0, h0 = rng.uniform(-2, 2, (3, 2, 2)), rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2)
        c = rng.uniform(-1, 1, (3, 2, 2))
        x, s, h = f64(x0, True), f64(s0, True), f64(h0, True)
        ad.sum_all(ad.mul(ad.channel_affine(x, s, h), f64(c))).backward()
        obj = lambda xx, ss, hh: np.sum((xx * ss[None, :, None] + hh[None, :, None]) * c)
        assert rel_err(x.grad, central_diff(lambda v: obj(v, s0, h0), x0)) < 1e-6
        assert rel_err(s.grad, central_diff(lambda v: obj(x0, v, h0), s0)) < 1e-6
        assert rel_err(h.grad, central_diff(lambda v: obj(x0, s0, v), h0)) < 1e-6

    def test_channel_affine_only_per_channel(self):
        with pytest.raises(ad.ShapeError):
            ad.channel_affine(f64(np.ones((2, 3))), f64(np.ones(2)))

    def test_rsqrt_fd(self, rng):
        a0 = rng.uniform(0.5, 2, 4)
        a = f64(a0, True)
        ad.sum_all(ad.rsqrt(a, 1e-5)).backward()
        assert rel_err(a.grad, central_diff(lambda v: np.sum(1 / np.sqrt(v + 1e-5)), a0)) < 1e-6

    def test_concat_take(self, rng):
        x0 = rng.uniform(-2, 2, (2, 4))
        x = f64(x0, True)
        lo, hi = ad.take_channels(x, 0, 2), ad.take_channels(x, 2, 4)
        y = ad.concat([ad.scale(hi, 3.0), lo])
        ad.sum_all(ad.mul(y, y)).backward()
        expected = np.concatenate([2 * x0[:, :2], 18 * x0[:, 2:]], axis=1)
        np.testing.assert_allclose(x.grad, expected)


class TestBackward:
    def test_square(self):
        x = f64(3.0, True)
        ad.mul(x, x).backward()
        assert x.grad == 6.0

    def test_dead_relu(self):
        x = f64(-1.0, True)
        ad.relu(x).backward()
        assert x.grad == 0.0

    def test_relu_subgradient_zero(self):
        x = f64(0.0, True)
        ad.relu(x).backward()
        assert x.grad == 0.0

    def test_non_scalar_root(self):
        with pytest.raises(ad.ShapeError):
            ad.backward(f64([1.0, 2.0], True))

    def test_disconnected_leaf_untouched(self):
        x, z = f64([1.0, 2.0], True), f64([5.0], True)
        ad.sum_all(x).backward()
        assert z.grad is None

    def test_shared_node_visited_once(self):
        x = f64(2.0, True)
        y = ad.mul(x, x)
        ad.add(y, y).backward()
        assert x.grad == 8.0

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 2), elements=st.floats(-2, 2)),
           arrays(np.float64, (2, 2), elements=st.floats(-2, 2)))
    def test_linearity_of_adjoints(self, x0, w0):
        def grads(which):
            x, w = f64(x0, True), f64(w0, True)
            y = ad.matmul(x, w)
            r1 = ad.sum_all(ad.mul(y, y))
            r2 = ad.sum_all(ad.scale(ad.relu(y), 3.0))
            root = {"1": r1, "2": r2, "sum": ad.add(r1, r2)}[which]
            root.backward()
            return x.grad, w.grad

        g1, g2, gs = grads("1"), grads("2"), grads("sum")
        np.testing.assert_allclose(gs[0], g1[0] + g2[0], atol=1e-10)
        np.testing.assert_allclose(gs[1], g1[1] + g2[1], atol=1e-10)
