import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmask import tensor as T
from xmask.data import synthetic_dataset
from xmask.nn import (LayerSpec, ModelGraph, build_convnet, build_mlp, build_model, build_xunet, init_conv,
                      init_variance, slu, slu_np)
from xmask.rng import Rng
from xmask.tensor import ShapeError, Tensor

from oracles import central_diff, rel_err


def test_slu_values():
    assert slu_np(np.array(0.0), 0.5) == 0.0
    assert abs(slu_np(np.array(1.0), 0.5) - (1 + 0.5 * math.sin(1))) < 1e-6
    assert abs(slu_np(np.array(1.0), 0.5) - 1.420735) < 1e-6
    assert abs(slu_np(np.array(-math.pi), 0.5)) < 1e-6
    assert np.allclose(slu(T.tensor([0.0, 1.0]), 0.5).data, slu_np(np.array([0.0, 1.0]), 0.5))


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50, allow_nan=False), st.floats(0, 2, allow_nan=False))
def test_slu_properties(x, a):
    v = float(slu_np(np.array(x), a))
    assert v >= a * math.sin(x) - 1e-12
    if x > 0:
        assert abs(v - (x + a * math.sin(x))) < 1e-9


def test_slu_gradcheck(f64):
    x = np.linspace(-4, 4, 41)
    x = x[np.abs(x) > 1e-2]
    t = Tensor(x, requires_grad=True)
    (g,) = T.grad(T.tsum(slu(t, 0.5)), [t])
    fd = central_diff(lambda v: slu_np(v, 0.5).sum(), x, 1e-4)
    assert rel_err(g, fd) < 1e-3


def test_init_variance_values():
    assert abs(init_variance(8, 16, (3, 3)) - 1 / 108) < 1e-6
    assert abs(init_variance(1, 1, (1, 1)) - 1.0) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 7), st.integers(1, 7))
def test_init_variance_formula(i, o, h, w):
    assert init_variance(i, o, (h, w)) == 1.0 / (((i + o) / 2) * h * w)


def test_init_sample_variance():
    # 16*8*3*3 = 1152 weights per draw; pool draws until >= 1e4 samples
    ws = np.concatenate([init_conv(8, 16, (3, 3), Rng(s))[0].ravel() for s in range(9)])
    assert ws.size >= 10_000
    assert abs(ws.var() / (1 / 108) - 1) < 0.10


def test_mlp_shapes_and_softmax():
    m = build_mlp(seed=0)
    out = m(T.tensor(np.random.default_rng(0).random((4, 1, 28, 28))))
    assert out.shape == (4, 10)
    assert np.allclose(T.softmax(out, 1).data.sum(axis=1), 1, atol=1e-6)


@pytest.mark.parametrize("builder,shape", [(build_mlp, (1, 28, 28)), (build_convnet, (3, 32, 32))])
def test_untrained_accuracy_near_chance(builder, shape):
    ds = synthetic_dataset("blobs", 500, shape, seed=2)
    # single untrained nets often favour one class; chance level holds in expectation over inits
    accs = [np.mean(builder(seed=s).predict(ds.images) == ds.labels) for s in range(20)]
    assert 0.05 <= np.mean(accs) <= 0.15


def test_convnet_shape_and_input_gradient(f64):
    m = build_convnet(seed=1).requires_grad_(False)
    x = np.random.default_rng(1).random((2, 3, 32, 32))
    assert m(Tensor(x)).shape == (2, 10)
    xt = Tensor(x, requires_grad=True)
    (g,) = T.grad(T.tsum(T.gather_rows(m(xt), np.array([3, 7]))), [xt])
    assert np.any(g != 0)
    f = lambda v: m.logits(v)[[0, 1], [3, 7]].sum()
    idx = [5, 700, 2000, 4000]
    fd = central_diff(f, x, 1e-5, idx)
    assert rel_err(g.ravel()[idx], fd.ravel()[idx]) < 1e-3


def test_xunet_range_shape_determinism():
    m = build_xunet((1, 28, 28), seed=0)
    x = T.tensor(np.random.default_rng(0).random((1, 1, 28, 28)))
    a, b = m(x).data, m(x).data
    assert a.shape == (1, 1, 28, 28)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_xunet_output_range_on_wild_inputs(scale):
    m = build_xunet((1, 8, 8), widths=(2, 3, 4), seed=1)
    x = Rng(3).normal((2, 1, 8, 8)) * scale
    out = m(T.tensor(x)).data
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


def test_xunet_first_conv_gradcheck(f64):
    m = build_xunet((1, 8, 8), widths=(4, 6, 8), seed=2)
    x = np.random.default_rng(2).random((2, 1, 8, 8))
    target = np.random.default_rng(3).random((2, 1, 8, 8))
    w = m.params["0.weight"]

    def loss():
        return T.mean(T.absolute(m(Tensor(x)) - Tensor(target)))

    (g,) = T.grad(loss(), [w])
    base = w.data.copy()

    def f(v):
        w.data = v
        val = loss().item()
        w.data = base
        return val

    fd = central_diff(f, base, 1e-4)
    assert rel_err(g, fd) < 1e-3


def test_xunet_needs_divisible_input():
    with pytest.raises(ShapeError):
        build_xunet((1, 30, 30))


@pytest.mark.parametrize("kind,shape", [("mlp", (1, 28, 28)), ("convnet", (3, 32, 32)), ("xunet", (1, 28, 28)),
                                        ("mlp", (3, 32, 32)), ("convnet", (1, 32, 32)), ("xunet", (3, 32, 32))])
def test_graphs_compose_for_declared_inputs(kind, shape):
    m = build_model(kind, shape, seed=0)
    out = m(T.tensor(np.zeros((1,) + shape)))
    assert out.shape[1:] == m.output_shape


def test_bad_graph_rejected_at_build():
    with pytest.raises(ShapeError):
        build_convnet((1, 28, 28))  # three 2x2 pools need sides divisible by 8
    layers = [LayerSpec("flatten"), LayerSpec("dense", {"in_features": 10, "out_features": 2})]
    with pytest.raises(ShapeError):
        ModelGraph("mlp", layers, (1, 4, 4), "logits")


def test_wrong_input_shape_rejected():
    with pytest.raises(ShapeError):
        build_mlp()(T.zeros((1, 1, 27, 28)))


def test_frozen_restores_flags_and_clone_is_independent():
    m = build_mlp(seed=0)
    with m.frozen():
        assert not any(p.requires_grad for p in m.parameters())
    assert all(p.requires_grad for p in m.parameters())
    c = m.clone()
    c.params["1.weight"].data += 1
    assert c.param_hash() != m.param_hash()
