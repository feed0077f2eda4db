import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmask import tensor as T
from xmask.tensor import ShapeError, Tensor

from oracles import central_diff, rel_err


def gradcheck(fn, *arrays, h=1e-4, tol=1e-3):
    """Compare T.grad against central differences for every input of ``fn``."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = T.grad(fn(*ts), ts)
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(v if j == k else arrays[j]) for j in range(len(arrays))]
            return fn(*args).item()
        numeric = central_diff(f, a, h)
        assert rel_err(analytic[k], numeric) < tol, f"input {k}"


def r(*shape, lo=-2.0, hi=2.0, seed=0):
    return np.random.default_rng(seed + len(shape)).uniform(lo, hi, shape)


# -- examples ---------------------------------------------------------------

def test_add_mul_examples():
    assert np.array_equal(T.add(T.tensor([1, 2]), T.tensor([3, 4])).data, [4, 6])
    x = T.tensor([1.5, -2, 3])
    assert np.array_equal(T.mul(x, T.ones_like(x)).data, x.data)
    assert np.array_equal(T.mul(T.tensor([1, 2, 3]), T.tensor([0, 1, 2])).data, [0, 2, 6])
    assert np.array_equal(T.mul(x, T.zeros_like(x)).data, [0, 0, 0])


def test_matmul_examples(f64):
    assert np.array_equal(T.matmul(T.tensor(np.eye(2)), T.tensor([[1, 2], [3, 4]])).data, [[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(T.tensor([[1, 0]]), T.tensor([[2], [5]])).data, [[2]])
    a = Tensor([[1.0, 1.0]], requires_grad=True)
    b = Tensor([[2.0], [3.0]])
    (g,) = T.grad(T.tsum(T.matmul(a, b)), [a])
    fd = central_diff(lambda v: (v @ b.data).sum(), a.data, 1e-5)
    assert np.allclose(g, [[2, 3]]) and np.allclose(fd, [[2, 3]])


def test_backward_examples(f64):
    x = Tensor([0.3, -1.0, 2.0], requires_grad=True)
    assert np.array_equal(T.backward(T.tsum(x))[x], [1, 1, 1])
    y = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    assert np.array_equal(T.backward(T.tsum(y * y))[y], [2, -4, 6])
    assert np.array_equal(y.grad, [2, -4, 6])


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.add(T.zeros((2, 3)), T.zeros((3, 2)))
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3, 1)), T.zeros((1, 2)))
    with pytest.raises(ShapeError):
        T.conv2d(T.zeros((1, 2, 5, 5)), T.zeros((3, 1, 3, 3)))
    with pytest.raises(ShapeError):
        T.maxpool2d(T.zeros((1, 1, 5, 5)))


def test_backward_needs_scalar_and_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)
    with pytest.raises(RuntimeError):
        T.backward(T.tsum(Tensor([1.0, 2.0])))
    with T.no_grad():
        y = T.tsum(x * 3.0)
    with pytest.raises(RuntimeError):
        T.backward(y)


def test_enable_grad_inside_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        with T.enable_grad():
            y = T.tsum(x * x)
        assert not T.is_grad_enabled()
    assert np.allclose(T.grad(y, [x])[0], [2, 4])


def test_grad_for_unused_leaf_is_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([[1.0]], requires_grad=True)
    gx, gu = T.grad(T.tsum(x), [x, unused])
    assert np.array_equal(gu, [[0.0]])


def test_tape_order_and_single_visit():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = x * 2.0
    loss = T.tsum(a * a + a)  # 'a' reached along three paths
    tape = T.GradTape(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]
    assert np.allclose(T.grad(loss, [x])[0], 2 * (2 * a.data + 1))


def test_relu_derivative_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    assert np.array_equal(T.grad(T.tsum(T.relu(x)), [x])[0], [0, 1, 0])


def test_float_modes():
    assert T.get_float_mode() == "f32"
    assert T.tensor([1.0]).dtype == np.float32
    with T.float_mode("f64"):
        assert T.tensor([1.0]).dtype == np.float64
    assert T.default_dtype() is np.float32
    with pytest.raises(ValueError):
        T.set_float_mode("f16")


def test_replay_is_bitwise_deterministic():
    x = r(3, 4).astype(np.float32)
    w = r(4, 5).astype(np.float32)

    def run():
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        loss = T.tsum(T.tanh(T.matmul(xt, wt)) * T.sigmoid(T.matmul(xt, wt)))
        return loss.data, T.grad(loss, [xt, wt])

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


# -- gradient checks (64-bit, step 1e-4, 1e-3 relative) -----------------------

UNARY = {
    "exp": T.exp, "sin": T.sin, "cos": T.cos, "tanh": T.tanh, "sigmoid": T.sigmoid,
    "square": T.square, "neg": T.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradcheck(f64, name):
    gradcheck(lambda x: T.tsum(UNARY[name](x) * UNARY[name](x)), r(3, 4))


def test_log_gradcheck(f64):
    gradcheck(lambda x: T.tsum(T.log(x)), r(3, 4, lo=0.5, hi=2.0))


@pytest.mark.parametrize("fn", [T.relu, T.absolute], ids=["relu", "abs"])
def test_kinked_gradcheck(f64, fn):
    x = r(4, 5)
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
    gradcheck(lambda v: T.tsum(fn(v) * T.sin(v)), x)


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul], ids=["add", "sub", "mul"])
def test_binary_gradcheck(f64, op):
    gradcheck(lambda a, b: T.tsum(T.sin(op(a, b))), r(2, 3), r(2, 3, seed=1))


def test_div_gradcheck(f64):
    gradcheck(lambda a, b: T.tsum(T.div(a, b)), r(2, 3), r(2, 3, lo=0.5, hi=2.0, seed=1))
    gradcheck(lambda a: T.tsum(T.div(a, 3.0) + a * 2.0 - 1.0), r(4))


def test_reductions_and_reshapes_gradcheck(f64):
    gradcheck(lambda a: T.tsum(T.sin(T.mean(a, axis=1))), r(3, 4))
    gradcheck(lambda a: T.tsum(T.square(T.tsum(a, axis=0))), r(3, 4))
    gradcheck(lambda a: T.tsum(T.sin(T.reshape(a, (4, 3)))), r(3, 4))
    gradcheck(lambda a: T.tsum(T.sin(T.flatten(a))), r(2, 2, 3))
    gradcheck(lambda a, b: T.tsum(T.sin(T.concat([a, b, a], 1))), r(2, 1, 3), r(2, 2, 3, seed=4))


def test_gather_and_softmax_gradcheck(f64):
    labels = np.array([2, 0, 1])
    gradcheck(lambda a: T.tsum(T.sin(T.gather_rows(a, labels))), r(3, 4))
    gradcheck(lambda a: T.tsum(T.square(T.log_softmax(a, 1))), r(3, 4))
    gradcheck(lambda a: T.tsum(T.square(T.softmax(a, 1))), r(3, 4))
    gradcheck(lambda a: T.cross_entropy(a, labels), r(3, 4))


def test_matmul_linear_gradcheck(f64):
    gradcheck(lambda a, b: T.tsum(T.sin(T.matmul(a, b))), r(3, 4), r(4, 2, seed=2))
    gradcheck(lambda x, w, b: T.tsum(T.sin(T.linear(x, w, b))), r(3, 4), r(4, 2, seed=2), r(2, seed=3))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradcheck(f64, stride, pad):
    gradcheck(lambda x, w, b: T.tsum(T.sin(T.conv2d(x, w, b, stride, pad))),
              r(2, 2, 5, 5), r(3, 2, 3, 3, seed=5), r(3, seed=6))


def test_conv_transpose2d_gradcheck(f64):
    gradcheck(lambda x, w, b: T.tsum(T.sin(T.conv_transpose2d(x, w, b, 2))),
              r(2, 3, 3, 3), r(3, 2, 2, 2, seed=5), r(2, seed=6))


def test_maxpool_gradcheck(f64):
    x = np.random.default_rng(3).permutation(64).reshape(1, 1, 8, 8) / 10.0  # distinct values: no ties
    gradcheck(lambda v: T.tsum(T.square(T.maxpool2d(v, 2))), x)


def test_clamp_and_where_gradcheck(f64):
    x = r(10)
    lo, hi = np.full(10, -1.0), np.full(10, 1.0)
    x[np.abs(np.abs(x) - 1) < 1e-2] = 0.3
    gradcheck(lambda v: T.tsum(T.square(T.clamp_to(v, lo, hi))), x)
    cond = x > 0
    gradcheck(lambda v: T.tsum(T.square(T.where_const(cond, v, np.zeros(10)))), x)


def test_conv_matches_direct_loops(f64):
    x, w = r(1, 2, 5, 6), r(3, 2, 3, 3, seed=7)
    out, _ = T.conv2d_forward(x, w, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for o in range(3):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    assert np.allclose(out, ref)


def test_conv_transpose_is_adjoint_of_strided_conv(f64):
    # <deconv(x), y> == <x, conv(y)> with the weight axes swapped
    x, y = r(1, 3, 4, 4), r(1, 2, 8, 8, seed=9)
    w = r(3, 2, 2, 2, seed=8)
    lhs = np.sum(T.conv_transpose2d_forward(x, w, 2) * y)
    conv, _ = T.conv2d_forward(y, w, 2, 0)
    assert np.isclose(lhs, np.sum(x * conv))


# -- properties -------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=20))
def test_hadamard_identity_and_zero(vals):
    x = T.tensor(vals)
    assert np.array_equal(T.mul(x, T.ones_like(x)).data, x.data)
    assert not np.any(T.mul(x, T.zeros_like(x)).data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 4), st.integers(1, 4))
def test_random_composite_gradcheck(seed, n, m):
    rng = np.random.default_rng(seed)
    with T.float_mode("f64"):
        a, b = rng.uniform(-2, 2, (n, m)), rng.uniform(-2, 2, (m, 3))
        gradcheck(lambda p, q: T.tsum(T.tanh(T.matmul(p, q)) * T.sigmoid(T.matmul(p, q))), a, b)
