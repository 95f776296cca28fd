import math

import mpmath
import numpy as np
import pytest

from milelab import numcore as nc
from milelab.errors import ContractError, DimensionError, NumericError
from milelab.gradcheck import check_op, rel_err

RNG = np.random.default_rng(7)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = nc.matmul(nc.Tensor([[1, 0], [0, 1]]), nc.Tensor([[3], [4]]))
        assert out.data.tolist() == [[3.0], [4.0]]

    def test_scalar_case(self):
        assert nc.matmul(nc.Tensor([[2]]), nc.Tensor([[3]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self):
        a, b = RNG.normal(size=(4, 5)), RNG.normal(size=(5, 3))
        np.testing.assert_allclose(nc.matmul(nc.Tensor(a), nc.Tensor(b)).data, triple_loop_matmul(a, b),
                                   rtol=1e-13, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))

    def test_backward_formula(self):
        a = nc.Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        b = nc.Tensor(RNG.normal(size=(4, 2)), requires_grad=True)
        g = RNG.normal(size=(3, 2))
        nc.sum(nc.mul(nc.matmul(a, b), nc.Tensor(g))).backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestLogSoftmax:
    def test_symmetric(self):
        out = nc.log_softmax(nc.Tensor([0.0, 0.0])).data
        np.testing.assert_allclose(out, [-math.log(2)] * 2, rtol=0, atol=1e-15)

    def test_no_overflow(self):
        out = nc.log_softmax(nc.Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert abs(out[0]) < 1e-300 or out[0] == 0.0
        assert out[1] == pytest.approx(-1000.0, abs=1e-12)

    def test_against_high_precision(self):
        z = [1.0, 2.0, 3.0]
        mpmath.mp.dps = 40
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in z))
        expected = [float(mpmath.mpf(v) - lse) for v in z]
        np.testing.assert_allclose(nc.log_softmax(nc.Tensor(z)).data, expected, rtol=1e-15, atol=1e-15)

    @pytest.mark.parametrize("mag", [1.0, 10.0, 100.0, 1e3, 1e4])
    def test_normalized(self, mag):
        z = RNG.uniform(-mag, mag, size=(20, 50))
        s = np.exp(nc.log_softmax(nc.Tensor(z)).data).sum(axis=-1)
        np.testing.assert_allclose(s, 1.0, rtol=0, atol=1e-12)

    def test_non_finite_input(self):
        t = nc.Tensor([0.0, 1.0])
        t.data[0] = np.inf
        with pytest.raises(NumericError):
            nc.log_softmax(t)


class TestBackward:
    def test_sum(self):
        x = nc.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        nc.sum(x).backward()
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_square(self):
        x = nc.Tensor(3.0, requires_grad=True)
        nc.mul(x, x).backward()
        assert float(x.grad) == 6.0

    def test_polynomial_chain_vs_fd(self):
        def f(x):
            y = nc.add(nc.mul(x, x), nc.scale(x, 3.0))       # x^2 + 3x
            z = nc.mul(nc.mul(y, y), x)                       # (x^2+3x)^2 x
            return nc.sum(nc.add(z, nc.scale(nc.mul(y, x), -0.5)))

        x0 = RNG.normal(size=5)
        xt = nc.Tensor(x0, requires_grad=True)
        f(xt).backward()
        h = 1e-5
        fd = np.empty(5)
        for i in range(5):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (f(nc.Tensor(xp)).item() - f(nc.Tensor(xm)).item()) / (2 * h)
        assert rel_err(xt.grad, fd) < 1e-6

    def test_non_scalar_rejected(self):
        x = nc.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            nc.scale(x, 2.0).backward()

    def test_unreachable_untouched(self):
        x = nc.Tensor([1.0, 2.0], requires_grad=True)
        other = nc.Tensor([5.0], requires_grad=True)
        other.grad = np.array([42.0])
        _ = nc.sum(nc.scale(other, 2.0))  # recorded but not part of the loss below
        nc.sum(nc.mul(x, x)).backward()
        assert other.grad.tolist() == [42.0]
        assert x.grad.tolist() == [2.0, 4.0]

    def test_shared_subexpression_visited_once(self):
        x = nc.Tensor([2.0], requires_grad=True)
        y = nc.mul(x, x)
        nc.sum(nc.add(y, y)).backward()  # d/dx 2x^2 = 4x
        assert x.grad.tolist() == [8.0]

    def test_repeat_is_bitwise_identical(self):
        w = RNG.normal(size=(6, 4))
        xs = RNG.normal(size=(3, 6))

        def run():
            wt = nc.Tensor(w, requires_grad=True)
            h = nc.silu(nc.matmul(nc.Tensor(xs), wt))
            nc.mean(nc.mul(h, h)).backward()
            return wt.grad

        assert run().tobytes() == run().tobytes()

    def test_no_grad_records_nothing(self):
        x = nc.Tensor([1.0], requires_grad=True)
        with nc.no_grad():
            y = nc.scale(x, 2.0)
        assert not y.requires_grad and y._parents == ()

    def test_nan_never_stored(self):
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            nc.exp(nc.Tensor([1e4]))


# every differentiable op against central finite differences (rel. err <= 1e-5)

def _w(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


OP_CASES = {
    "add": (lambda a, b: nc.sum(nc.mul(nc.add(a, b), nc.Tensor(_w((3, 4), 1)))), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: nc.sum(nc.mul(nc.add(a, b), nc.Tensor(_w((3, 4), 1)))), [(3, 4), (4,)]),
    "mul": (lambda a, b: nc.sum(nc.mul(a, b)), [(2, 5), (2, 5)]),
    "mul_gain": (lambda a, b: nc.sum(nc.mul(nc.mul(a, b), a)), [(2, 3, 4), (4,)]),
    "scale": (lambda a: nc.sum(nc.mul(nc.scale(a, -1.7), a)), [(6,)]),
    "exp": (lambda a: nc.sum(nc.mul(nc.exp(a), nc.Tensor(_w((5,), 2)))), [(5,)]),
    "log": (lambda a: nc.sum(nc.log(nc.add(nc.mul(a, a), nc.Tensor(np.ones(5))))), [(5,)]),
    "square": (lambda a: nc.sum(nc.mul(nc.square(a), a)), [(4,)]),
    "silu": (lambda a: nc.sum(nc.mul(nc.silu(a), nc.Tensor(_w((7,), 3)))), [(7,)]),
    "gelu": (lambda a: nc.sum(nc.mul(nc.gelu(a), nc.Tensor(_w((7,), 4)))), [(7,)]),
    "mean": (lambda a: nc.mean(nc.mul(a, a)), [(3, 3)]),
    "matmul": (lambda a, b: nc.sum(nc.mul(nc.matmul(a, b), nc.Tensor(_w((3, 2), 5)))), [(3, 4), (4, 2)]),
    "matmul_batched": (
        lambda a, b: nc.sum(nc.mul(nc.matmul(a, b), nc.Tensor(_w((2, 3, 2), 6)))), [(2, 3, 4), (2, 4, 2)]
    ),
    "linear": (lambda a, b: nc.sum(nc.mul(nc.linear(a, b), nc.Tensor(_w((2, 3, 5), 7)))), [(2, 3, 4), (4, 5)]),
    "rms_norm": (
        lambda a, g: nc.sum(nc.mul(nc.rms_norm(a, g), nc.Tensor(_w((3, 6), 8)))), [(3, 6), (6,)]
    ),
    "log_softmax": (lambda a: nc.sum(nc.mul(nc.log_softmax(a), nc.Tensor(_w((2, 5), 9)))), [(2, 5)]),
    "causal_softmax": (
        lambda a: nc.sum(nc.mul(nc.causal_softmax(a), nc.Tensor(_w((2, 4, 4), 10)))), [(2, 4, 4)]
    ),
    "reshape": (lambda a: nc.sum(nc.mul(nc.reshape(a, (6, 2)), nc.Tensor(_w((6, 2), 11)))), [(3, 4)]),
    "transpose": (
        lambda a: nc.sum(nc.mul(nc.transpose(a, (2, 0, 1)), nc.Tensor(_w((4, 2, 3), 12)))), [(2, 3, 4)]
    ),
    "concat": (
        lambda a, b: nc.sum(nc.mul(nc.concat([a, b], axis=1), nc.Tensor(_w((2, 5), 13)))), [(2, 2), (2, 3)]
    ),
    "rotary": (
        lambda a: nc.sum(nc.mul(nc.rotary(a, *nc.rotary_tables(3, 4)), nc.Tensor(_w((2, 3, 4), 14)))),
        [(2, 3, 4)],
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_fd(name):
    fn, shapes = OP_CASES[name]
    arrays = [np.random.default_rng(100 + i).normal(size=s) for i, s in enumerate(shapes)]
    assert check_op(fn, arrays) <= 1e-5


def test_embedding_gradient_matches_fd():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    wt = _w((2, 3, 5), 15)

    def fn(w):
        return nc.sum(nc.mul(nc.embedding(w, ids), nc.Tensor(wt)))

    assert check_op(fn, [_w((4, 5), 16)]) <= 1e-5


def test_causal_softmax_masks_future():
    y = nc.causal_softmax(nc.Tensor(RNG.normal(size=(4, 4)))).data
    assert np.all(np.triu(y, 1) == 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-15)


def test_concat_reshape_shape_errors():
    with pytest.raises(DimensionError):
        nc.reshape(nc.Tensor(np.ones(6)), (4, 2))
    with pytest.raises(DimensionError):
        nc.concat([nc.Tensor(np.ones((2, 2))), nc.Tensor(np.ones((3, 3)))], axis=1)
    with pytest.raises(DimensionError):
        nc.add(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2,))))
