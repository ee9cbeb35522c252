import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from passr import tensor as T
from passr.tensor import NonFiniteError, Tensor


def leaf(a):
    return Tensor(np.array(a), requires_grad=True)


# ---------------------------------------------------------------- broadcasting

def brute_broadcast_add(a, b):
    """Element-by-element sum following the right-aligned broadcasting rule."""
    nd = max(a.ndim, b.ndim)
    sa = (1,) * (nd - a.ndim) + a.shape
    sb = (1,) * (nd - b.ndim) + b.shape
    out_shape = tuple(max(x, y) for x, y in zip(sa, sb))
    A, B = a.reshape(sa), b.reshape(sb)
    out = np.zeros(out_shape)
    for idx in itertools.product(*(range(n) for n in out_shape)):
        ia = tuple(0 if sa[k] == 1 else idx[k] for k in range(nd))
        ib = tuple(0 if sb[k] == 1 else idx[k] for k in range(nd))
        out[idx] = A[ia] + B[ib]
    return out


@st.composite
def compatible_shapes(draw):
    base = draw(st.lists(st.integers(1, 3), min_size=1, max_size=3))
    a = [draw(st.sampled_from([n, 1])) for n in base]
    b = [draw(st.sampled_from([n, 1])) for n in base]
    a = a[draw(st.integers(0, len(a))):]
    b = b[draw(st.integers(0, len(b))):]
    return tuple(a), tuple(b)


@settings(max_examples=60, deadline=None)
@given(compatible_shapes(), st.integers(0, 2 ** 31 - 1))
def test_broadcast_matches_brute_force(shapes, seed):
    sa, sb = shapes
    r = np.random.default_rng(seed)
    a, b = r.normal(size=sa), r.normal(size=sb)
    with T.precision(np.float64):
        out = T.add(Tensor(a), Tensor(b))
    assert out.shape == T.broadcast_shape(sa, sb)
    np.testing.assert_array_equal(out.data, brute_broadcast_add(a, b))


@settings(max_examples=60, deadline=None)
@given(compatible_shapes(), st.integers(0, 2 ** 31 - 1))
def test_broadcast_gradient_sums_over_expanded_axes(shapes, seed):
    sa, sb = shapes
    r = np.random.default_rng(seed)
    with T.precision(np.float64):
        a, b = leaf(r.normal(size=sa)), leaf(r.normal(size=sb))
        out = T.tsum(a * b)
        T.backward(out)
    full = np.broadcast_shapes(sa, sb)
    ga = np.broadcast_to(b.data, full).copy()
    # reduce over the axes a was expanded along
    while ga.ndim > len(sa):
        ga = ga.sum(0)
    for k, n in enumerate(sa):
        if n == 1:
            ga = ga.sum(k, keepdims=True)
    np.testing.assert_allclose(a.grad, ga, rtol=1e-12, atol=1e-12)


def test_incompatible_shapes_raise():
    with pytest.raises(ValueError):
        T.broadcast_shape((2, 3), (4,))
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_scalar_operands_keep_tensor_dtype():
    x = T.tensor([1.0, 2.0])
    assert (x * 0.5).dtype == np.float32
    assert (2.0 - x).dtype == np.float32


# ---------------------------------------------------------------- element-wise ops

UNARY = {
    "neg": (T.neg, lambda x: x),
    "exp": (T.exp, lambda x: x),
    "log": (T.log, lambda x: np.abs(x) + 0.5),
    "abs": (T.tabs, lambda x: x + np.sign(x) * 0.1),
    "square": (T.square, lambda x: x + np.sign(x) * 0.5),
    "leaky_relu": (lambda a: T.leaky_relu(a, 0.1), lambda x: x + np.sign(x) * 0.1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(f64, name):
    op, prep = UNARY[name]
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = prep(r.normal(size=(3, 4)))
        # weights bounded away from 0 keep every gradient entry well-conditioned
        w = r.uniform(0.5, 1.5, size=(3, 4)) * r.choice([-1.0, 1.0], size=(3, 4))
        err = T.finite_diff_check(lambda a: T.tsum(op(a) * w), [x], step=1e-6)
        assert err < 1e-4, (name, seed, err)


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcasting(f64, kind):
    for seed in range(10):
        r = np.random.default_rng(seed)
        a = r.normal(size=(2, 3, 4))
        b = r.uniform(0.5, 1.5, size=(3, 1))
        err = T.finite_diff_check(lambda x, y: T.tsum(T.square(T.elementwise(kind, x, y))), [a, b], step=1e-6)
        assert err < 1e-4, (kind, seed, err)


def test_leaky_relu_values_and_kink():
    x = leaf(np.array([-2.0, 0.0, 3.0]))
    y = T.leaky_relu(x, 0.1)
    np.testing.assert_allclose(y.data, [-0.2, 0.0, 3.0])
    T.backward(T.tsum(y))
    # the kink takes the negative-side slope
    np.testing.assert_allclose(x.grad, [0.1, 0.1, 1.0])


def test_abs_subgradient_at_zero_is_zero():
    x = leaf(np.array([-1.0, 0.0, 2.0]))
    T.backward(T.tsum(T.tabs(x)))
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_results_raise():
    with pytest.raises(NonFiniteError):
        T.log(T.tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        T.div(T.tensor([1.0]), T.tensor([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(T.tensor([1000.0]))


# ---------------------------------------------------------------- reductions, shapes, indexing

def test_reduction_and_shape_gradients(f64):
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=(2, 3, 4))
        w = np.random.default_rng(seed + 100).normal(size=(4, 3, 2))
        cases = [
            lambda a: T.tsum(T.square(T.tsum(a, axis=1))),
            lambda a: T.tsum(T.square(T.mean(a, axis=(0, 2), keepdims=True))),
            lambda a: T.tsum(T.transpose(a, (2, 1, 0)) * w),
            lambda a: T.tsum(T.reshape(a, (6, 4)) * w.reshape(6, 4)),
            lambda a: T.tsum(T.square(a[:, 1:, ::2])),
            lambda a: T.tsum(T.square(a[np.array([0, 1, 0]), :, 1])),
            lambda a: T.tsum(T.square(T.concat([a, a * 2.0], axis=-1))),
            lambda a: T.tsum(T.square(T.swap_last(a))),
        ]
        for k, f in enumerate(cases):
            err = T.finite_diff_check(f, [x], step=1e-6)
            assert err < 1e-4, (seed, k, err)


def test_repeated_advanced_index_accumulates():
    x = leaf(np.arange(3.0))
    T.backward(T.tsum(x[np.array([0, 0, 2])]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_fan_out_accumulates():
    x = leaf(np.array([1.5, -2.0]))
    y = x * x + x * 3.0 + x
    T.backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_shared_subexpression_visited_once():
    x = leaf(np.array(2.0))
    h = x * x
    z = h * h + h
    grads = T.backward(z)
    # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert float(x.grad) == pytest.approx(4 * 8 + 4)
    assert set(grads) == {x}


def test_deep_chain_has_no_recursion_limit():
    x = leaf(np.array(1.0))
    y = x
    for _ in range(5000):
        y = y * 1.0
    T.backward(y)
    assert float(x.grad) == 1.0


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.backward(leaf(np.ones(3)) * 2.0)


# ---------------------------------------------------------------- matmul

def triple_loop_matmul(a, b):
    *batch, n, k = a.shape
    m = b.shape[-1]
    out = np.zeros((*batch, n, m))
    for idx in itertools.product(*(range(x) for x in batch)):
        bb = b if b.ndim == 2 else b[idx]
        for i in range(n):
            for j in range(m):
                out[idx + (i, j)] = sum(a[idx + (i, t)] * bb[t, j] for t in range(k))
    return out


def test_batched_matmul_matches_triple_loop(f64, rng):
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(2, 3, 5, 4))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12)
    w = rng.normal(size=(5, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(w)).data, triple_loop_matmul(a, w), atol=1e-12)


def test_matmul_gradients(f64):
    for seed in range(10):
        r = np.random.default_rng(seed)
        a, b, w = r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3)), r.normal(size=(4, 2))
        assert T.finite_diff_check(lambda x, y: T.tsum(T.square(T.matmul(x, y))), [a, b], step=1e-6) < 1e-4
        assert T.finite_diff_check(lambda x, y: T.tsum(T.square(T.matmul(x, y))), [a, w], step=1e-6) < 1e-4


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.matmul(T.tensor(np.ones((2, 2, 3))), T.tensor(np.ones((3, 3, 2))))


# ---------------------------------------------------------------- softmax

def test_softmax_rows_and_stability(f64, rng):
    x = rng.normal(size=(3, 4, 5)) * 50 + 1000
    y = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    ref = np.exp(x - x.max(-1, keepdims=True))
    np.testing.assert_allclose(y, ref / ref.sum(-1, keepdims=True), rtol=1e-12)


def test_softmax_gradient(f64):
    for seed in range(10):
        r = np.random.default_rng(seed)
        x, w = r.normal(size=(2, 3, 6)), r.normal(size=(2, 3, 6))
        assert T.finite_diff_check(lambda a: T.tsum(T.softmax(a) * w), [x], step=1e-6) < 1e-4


# ---------------------------------------------------------------- conv2d

def seven_loop_conv(x, w, b, dilation):
    """Direct same-padded cross-correlation, one multiply-add at a time."""
    N, H, W, C = x.shape
    kh, kw, _, O = w.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    out = np.zeros((N, H, W, O))
    for n in range(N):
        for i in range(H):
            for j in range(W):
                for o in range(O):
                    acc = b[o]
                    for u in range(kh):
                        for v in range(kw):
                            for c in range(C):
                                y, z = i + u * dilation - ph, j + v * dilation - pw
                                if 0 <= y < H and 0 <= z < W:
                                    acc += x[n, y, z, c] * w[u, v, c, o]
                    out[n, i, j, o] = acc
    return out


@pytest.mark.parametrize("k,dilation", [(1, 1), (3, 1), (3, 2), (3, 4), (3, 8), (5, 1)])
def test_conv2d_matches_direct_loops(f64, rng, k, dilation):
    x = rng.normal(size=(2, 5, 7, 3))
    w = rng.normal(size=(k, k, 3, 2))
    b = rng.normal(size=2)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation).data
    np.testing.assert_allclose(out, seven_loop_conv(x, w, b, dilation), atol=1e-12)


def test_conv2d_unbatched_input(f64, rng):
    x = rng.normal(size=(4, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = np.zeros(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 1).data
    np.testing.assert_allclose(out, seven_loop_conv(x[None], w, b, 1)[0], atol=1e-12)


@pytest.mark.parametrize("k,dilation", [(1, 1), (3, 1), (3, 2), (3, 4)])
def test_conv2d_gradients(f64, k, dilation):
    for seed in range(10):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(1, 5, 6, 2)), r.normal(size=(k, k, 2, 3)), r.normal(size=3)
        t = r.normal(size=(1, 5, 6, 3))
        f = lambda a, c, d: T.tsum(T.conv2d(a, c, d, dilation) * t)
        assert T.finite_diff_check(f, [x, w, b], step=1e-6) < 1e-4


def test_conv2d_errors():
    x = T.tensor(np.ones((4, 4, 2)))
    with pytest.raises(ValueError):
        T.conv2d(x, T.tensor(np.ones((3, 3, 3, 1))))
    with pytest.raises(ValueError):
        T.conv2d(x, T.tensor(np.ones((2, 2, 2, 1))))
    with pytest.raises(ValueError):
        T.conv2d(x, T.tensor(np.ones((3, 3, 2, 1))), dilation=0)


# ---------------------------------------------------------------- precision and the checker

def test_precision_context_restores_dtype():
    assert T.get_dtype() == np.float32
    with T.precision(np.float64):
        assert T.tensor([1.0]).dtype == np.float64
    assert T.tensor([1.0]).dtype == np.float32


def test_finite_diff_check_detects_wrong_gradient(f64):
    def bad(a):
        # value is sum(a^2) but the recorded gradient is 3a instead of 2a
        return T._result(np.sum(a.data ** 2), (a,), lambda g: (3 * g * a.data,), "bad")

    assert T.finite_diff_check(bad, [np.array([1.0, 2.0])]) > 0.1


def test_parameters_of_collects_leaves():
    a, b = leaf(np.ones(2)), Tensor(np.ones(2))
    assert T.parameters_of([a, b, a]) == [a]


def test_checker_refines_across_a_kink(f64):
    # the leaky ReLU kink at 0 lies inside the first stencil
    x = np.array([3e-5, -2e-5, 0.7])
    f = lambda a: T.tsum(T.leaky_relu(a) * np.array([1.0, 2.0, 3.0]))
    assert T.finite_diff_check(f, [x], step=1e-4) < 1e-8
    assert T.finite_diff_check(f, [x], step=1e-4, refine=0) > 0.1
