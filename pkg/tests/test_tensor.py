"""Substrate tests: matmul/cumsum against naive oracles, tape vs finite differences."""

import numpy as np
import pytest

import ela.tensor as T
from ela.errors import FinitenessError, ShapeError, UsageError
from ela.tensor import Tape, Tensor, tensor3

T._CHECK_ALL_OPS = True  # validate finiteness of every op output in tests


def matmul_oracle(a, b):
    """Naive triple-loop product, the independent reference."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def cumsum_oracle(x):
    """Per-position re-summation."""
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(x.shape[0]):
        for i in range(x.shape[1]):
            out[b, i] = x[b, : i + 1].sum(axis=0, dtype=np.float64)
    return out


def central_diff(fn, arrays, which, idx, h=1e-5):
    """Central finite difference of scalar fn at arrays[which][idx]."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which][idx] += h
    minus[which][idx] -= h
    return (fn(plus) - fn(minus)) / (2 * h)


def check_grads_fd(fn, arrays, rng, n_coords=16, h=1e-5, rtol=1e-4):
    """Compare tape gradients of scalar fn against central differences."""
    tensors = [Tensor(a) for a in arrays]
    with Tape() as tape:
        loss = fn(tensors)
    tape.backward(loss)
    grads = [tape.grad(t).data for t in tensors]

    def fn_np(arrs):
        return fn([Tensor(a) for a in arrs]).item()

    for which, a in enumerate(arrays):
        n = min(n_coords, a.size)
        flat_choices = rng.choice(a.size, size=n, replace=False)
        for flat in flat_choices:
            idx = np.unravel_index(flat, a.shape)
            fd = central_diff(fn_np, arrays, which, idx, h=h)
            an = grads[which][idx]
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom <= rtol, (
                f"input {which} coord {idx}: analytic {an} vs fd {fd}"
            )


class TestTensorType:
    def test_rejects_nonfinite(self):
        with pytest.raises(FinitenessError):
            Tensor([1.0, np.inf])
        with pytest.raises(FinitenessError):
            tensor3(np.full((1, 2, 2), np.nan))

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 3.0

    def test_tensor3_shape_contract(self):
        t = tensor3(np.zeros((2, 3, 4)))
        assert (t.batch, t.length, t.dim) == (2, 3, 4)
        assert t.size == 2 * 3 * 4
        with pytest.raises(ShapeError):
            tensor3(np.zeros((2, 3)))

    def test_precision(self):
        assert Tensor([1.0], precision="f32").precision == "f32"
        assert Tensor([1.0]).precision == "f64"


class TestMatmul:
    def test_identity(self):
        m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = T.matmul(Tensor(np.eye(2)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_direct_arithmetic(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(T.matmul(a, b).data, [[3.0], [7.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        out = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, matmul_oracle(a, b), rtol=0, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_precision_mismatch(self):
        a = Tensor(np.zeros((2, 2)), precision="f32")
        b = Tensor(np.zeros((2, 2)), precision="f64")
        with pytest.raises(UsageError):
            T.matmul(a, b)

    def test_associativity(self):
        rng = np.random.default_rng(7)
        a, b, c = (Tensor(rng.standard_normal((8, 8))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=0, atol=1e-10)

    def test_f32_accumulates_in_f64(self):
        # values chosen so f32 accumulation would lose the small addend
        a = np.full((1, 4096), 1.0, dtype=np.float32)
        b = np.full((4096, 1), 1.0, dtype=np.float32)
        a[0, 0] = 2**12
        out = T.matmul(Tensor(a), Tensor(b)).data
        assert out[0, 0] == np.float32(4095 + 2**12)


class TestCumsum:
    def test_zeros(self):
        x = tensor3(np.zeros((2, 3, 4)))
        np.testing.assert_array_equal(T.cumsum_seq(x).data, 0.0)

    def test_ones(self):
        x = tensor3(np.ones((1, 3, 1)))
        np.testing.assert_array_equal(T.cumsum_seq(x).data[0, :, 0], [1.0, 2.0, 3.0])

    def test_against_resum(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 64, 5))
        out = T.cumsum_seq(tensor3(x)).data
        np.testing.assert_allclose(out, cumsum_oracle(x), rtol=0, atol=1e-12)

    def test_last_position_equals_full_sum(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 50, 4))
        out = T.cumsum_seq(tensor3(x)).data
        np.testing.assert_allclose(
            out[:, -1, :], x.sum(axis=1), rtol=0, atol=1e-10
        )


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        with Tape() as tape:
            loss = T.tsum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(x).data, np.ones((2, 3)))

    def test_square_sum_grad(self):
        rng = np.random.default_rng(3)
        arr = rng.standard_normal((4, 5))
        x = Tensor(arr)
        with Tape() as tape:
            loss = T.tsum(T.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(tape.grad(x).data, 2 * arr, atol=1e-12)

    def test_loss_not_on_tape(self):
        x = Tensor([1.0])
        with Tape() as tape:
            T.tsum(x)
        external = Tensor([0.5])
        with pytest.raises(UsageError):
            tape.backward(external)

    def test_unreachable_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0])
        y = Tensor([3.0, 4.0])
        with Tape() as tape:
            loss = T.tsum(x)
            T.tsum(y)  # recorded but not feeding the loss
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(y).data, 0.0)

    def test_composite_graph_vs_finite_differences(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 5))
        c = rng.standard_normal((4, 5))

        def fn(ts):
            ta, tb, tc = ts
            h = T.matmul(ta, tb)
            h = T.mul(T.sigmoid(h), T.add(h, tc))
            return T.tsum(T.mul(h, h))

        check_grads_fd(fn, [a, b, c], rng)


PRIMITIVE_CASES = [
    ("add", lambda ts: T.tsum(T.mul(T.add(ts[0], ts[1]), ts[0])), 2, (3, 4)),
    ("sub", lambda ts: T.tsum(T.mul(T.sub(ts[0], ts[1]), ts[1])), 2, (3, 4)),
    ("mul", lambda ts: T.tsum(T.mul(ts[0], ts[1])), 2, (3, 4)),
    ("div", lambda ts: T.tsum(T.div(ts[0], T.add(T.mul(ts[1], ts[1]), 1.0))), 2, (3, 4)),
    ("exp", lambda ts: T.tsum(T.exp(ts[0])), 1, (3, 4)),
    ("sigmoid", lambda ts: T.tsum(T.mul(T.sigmoid(ts[0]), ts[0])), 1, (3, 4)),
    ("rsqrt", lambda ts: T.tsum(T.rsqrt(T.add(T.mul(ts[0], ts[0]), 0.5))), 1, (3, 4)),
    ("matmul", lambda ts: T.tsum(T.mul(T.matmul(ts[0], ts[1]), T.matmul(ts[0], ts[1]))), 2, (4, 4)),
    ("mean", lambda ts: T.tmean(T.mul(ts[0], ts[0])), 1, (5, 3)),
    ("sum_axis", lambda ts: T.tsum(T.mul(T.tsum(ts[0], axis=1, keepdims=True), ts[0])), 1, (4, 3)),
    ("softmax", lambda ts: T.tsum(T.mul(T.softmax(ts[0]), ts[0])), 1, (4, 5)),
]


@pytest.mark.parametrize("name,fn,nargs,shape", PRIMITIVE_CASES)
def test_primitive_gradients_vs_fd(name, fn, nargs, shape):
    rng = np.random.default_rng(hash(name) % 2**32)
    arrays = [rng.standard_normal(shape) for _ in range(nargs)]
    check_grads_fd(fn, arrays, rng)


def test_cumsum_gradient_vs_fd():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 6, 3))
    w = rng.standard_normal((2, 6, 3))

    def fn(ts):
        return T.tsum(T.mul(T.cumsum_seq(ts[0]), Tensor(w)))

    check_grads_fd(fn, [x], rng)


def test_linear_gradient_vs_fd():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((3, 4))

    def fn(ts):
        return T.tsum(T.mul(T.linear(ts[0], ts[1]), T.linear(ts[0], ts[1])))

    check_grads_fd(fn, [x, w], rng)


def test_embedding_gradient_vs_fd():
    rng = np.random.default_rng(13)
    table = rng.standard_normal((7, 4))
    ids = rng.integers(0, 7, size=(2, 5))

    def fn(ts):
        e = T.embedding(ts[0], ids)
        return T.tsum(T.mul(e, e))

    check_grads_fd(fn, [table], rng)


def test_take_along_gradient_vs_fd():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((3, 6))
    idx = np.stack([rng.choice(6, size=2, replace=False) for _ in range(3)])

    def fn(ts):
        g = T.take_along(ts[0], idx, axis=-1)
        return T.tsum(T.mul(g, g))

    check_grads_fd(fn, [x], rng)


def test_cross_entropy_gradient_vs_fd():
    rng = np.random.default_rng(15)
    logits = rng.standard_normal((2, 3, 7))
    targets = rng.integers(0, 7, size=(2, 3))

    def fn(ts):
        return T.cross_entropy_mean(ts[0], targets)

    check_grads_fd(fn, [logits], rng)


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(16)
    logits = rng.standard_normal((2, 4, 9))
    targets = rng.integers(0, 9, size=(2, 4))
    got = T.cross_entropy_mean(Tensor(logits), targets).item()
    # manual log-softmax reference
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    want = -np.log(p[np.arange(2)[:, None], np.arange(4)[None, :], targets]).mean()
    assert abs(got - want) < 1e-12


def test_stop_gradient_blocks_flow():
    x = Tensor([2.0, 3.0])
    with Tape() as tape:
        held = T.stop_gradient(T.mul(x, x))
        loss = T.tsum(T.mul(held, x))
    tape.backward(loss)
    # d/dx of (const * x) = const = x*x values, not 3x^2
    np.testing.assert_allclose(tape.grad(x).data, np.array([4.0, 9.0]), atol=1e-12)
