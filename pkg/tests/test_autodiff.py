import numpy as np
import pytest

from fewseg.autodiff import Tensor, NumericError


def fd_grad(fn, x0, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    fd = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        fd[i] = (fn(xp) - fn(xm)) / (2 * h)
    return fd


def check(fn, x0, tol=1e-6):
    t = Tensor(x0.copy(), requires_grad=True)
    fn(t).backward()
    fd = fd_grad(lambda a: fn(Tensor(a)).item(), x0)
    scale = max(np.abs(fd).max(), 1.0)
    assert np.abs(t.grad - fd).max() / scale < tol


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestElementwise:
    def test_add_mul_div(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) + 2.0
        check(lambda t: ((t * 3.0 + Tensor(b)) / Tensor(b) - t).sum(), a)

    def test_broadcasting_unbroadcast(self, rng):
        a = rng.normal(size=(3, 1))
        b = rng.normal(size=(3, 5))
        check(lambda t: (t * Tensor(b)).sum(), a)
        check(lambda t: (Tensor(a) + t * 2.0).mean(), b)

    def test_exp_log_sqrt(self, rng):
        a = rng.random((4, 4)) + 0.5
        check(lambda t: (t.exp() + t.log() + t.sqrt()).sum(), a)

    def test_pow(self, rng):
        a = rng.random(6) + 0.5
        check(lambda t: (t**3).sum(), a)

    def test_relu_grad_masked(self):
        a = np.array([-2.0, -0.5, 0.5, 2.0])
        t = Tensor(a, requires_grad=True)
        t.relu().sum().backward()
        assert np.array_equal(t.grad, [0.0, 0.0, 1.0, 1.0])

    def test_clip_grad_zero_outside(self):
        a = np.array([-1.0, 0.5, 2.0])
        t = Tensor(a, requires_grad=True)
        t.clip(0.0, 1.0).sum().backward()
        assert np.array_equal(t.grad, [0.0, 1.0, 0.0])


class TestReductionsAndShape:
    def test_sum_axis_tuple(self, rng):
        a = rng.normal(size=(2, 3, 4))
        check(lambda t: (t.sum(axis=(1, 2)) ** 2).sum(), a)

    def test_mean_axis(self, rng):
        a = rng.normal(size=(3, 5))
        check(lambda t: (t.mean(axis=1) ** 2).sum(), a)

    def test_reshape_transpose_matmul(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 5))
        check(lambda t: (t.T.matmul(Tensor(b))).sum(), a)
        check(lambda t: (t.reshape(4, 3).matmul(Tensor(b[:, :2]))).sum(), a)

    def test_stack(self, rng):
        a = rng.normal(size=(2, 2))
        check(lambda t: (Tensor.stack([t, t * 2.0]) ** 2).sum(), a)


class TestGraph:
    def test_reused_node_accumulates(self):
        # one node feeding two consumers must receive both gradient paths
        t = Tensor(np.array([2.0]), requires_grad=True)
        y = t * 3.0 + t * t
        y.sum().backward()
        assert np.allclose(t.grad, [3.0 + 4.0])

    def test_diamond_graph(self, rng):
        a = rng.normal(size=(3,))
        check(lambda t: ((t * 2.0) * (t + 1.0)).sum(), a)

    def test_backward_requires_scalar(self):
        t = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            (t * 2.0).backward()

    def test_nonfinite_loss_raises(self):
        t = Tensor(np.array([0.0]), requires_grad=True)
        with pytest.raises(NumericError):
            (t / t).sum().backward()

    def test_constant_has_no_grad(self):
        c = Tensor(np.ones(3))
        t = Tensor(np.ones(3), requires_grad=True)
        (t * c).sum().backward()
        assert c.grad is None

    def test_detach_blocks_gradient(self):
        t = Tensor(np.array([3.0]), requires_grad=True)
        y = t * t.detach()
        y.sum().backward()
        assert np.allclose(t.grad, [3.0])


class TestConv2d:
    def test_matches_brute_force(self, rng):
        x = rng.normal(size=(3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = Tensor(x).conv2d(Tensor(w), Tensor(b), 2, 1).data

        ref = np.zeros((4, 4, 4))
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for co in range(4):
            for oy in range(4):
                for ox in range(4):
                    acc = b[co]
                    for ci in range(3):
                        for ky in range(3):
                            for kx in range(3):
                                acc += w[co, ci, ky, kx] * xp[ci, 2 * oy + ky, 2 * ox + kx]
                    ref[co, oy, ox] = acc
        assert np.abs(out - ref).max() < 1e-10

    def test_weight_and_input_grads(self, rng):
        x = rng.normal(size=(2, 6, 6))
        w0 = rng.normal(size=(3, 2, 3, 3))
        b0 = rng.normal(size=3)
        check(lambda t: (Tensor(x).conv2d(t, Tensor(b0), 2, 1) ** 2).sum(), w0)
        check(lambda t: (t.conv2d(Tensor(w0), Tensor(b0), 2, 1) ** 2).sum(), x)
        check(lambda t: (Tensor(x).conv2d(Tensor(w0), t, 1, 1) ** 2).sum(), b0)
