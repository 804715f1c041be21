from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meltr import autodiff as ad
from meltr.gradcheck import grad_suite, hvp_suite, random_composite, rel_err

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def small_arrays(shape=None):
    shapes = st.tuples(st.integers(1, 4), st.integers(1, 4)) if shape is None else st.just(shape)
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, ad.tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(ad.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_abs():
    assert ad.abs_(ad.tensor(-2.5)).item() == 2.5


def test_only_scalar_broadcasting():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones(3)))
    out = ad.mul(ad.tensor(np.ones((2, 3))), 2.0)
    np.testing.assert_array_equal(out.data, 2 * np.ones((2, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.tensor([0.0, 1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(ad.tensor([1000.0]))


@given(small_arrays())
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(ad.tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(s > 0)


@given(small_arrays((3, 5)))
def test_layer_norm_standardizes(x):
    x = x + np.linspace(0, 1, 5)  # avoid constant rows
    y = ad.layer_norm(ad.tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=1e-10)


def test_concat_reshape_transpose_embedding():
    a = ad.tensor(np.arange(6.0).reshape(2, 3))
    b = ad.tensor(np.arange(3.0).reshape(1, 3))
    np.testing.assert_array_equal(ad.concat([a, b], axis=0).data, np.vstack([a.data, b.data]))
    np.testing.assert_array_equal(ad.reshape(a, (3, 2)).data, a.data.reshape(3, 2))
    np.testing.assert_array_equal(ad.transpose(a).data, a.data.T)
    table = ad.tensor(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(ad.embedding(table, np.array([3, 0, 3])).data, table.data[[3, 0, 3]])


# ---------------------------------------------------------------------------
# first and second derivatives


def test_grad_square():
    w = ad.parameter(3.0)
    (g,) = ad.grad(ad.mul(w, w), [w])
    assert g.item() == 6.0


@given(small_arrays())
def test_grad_of_sum_is_ones(x):
    w = ad.parameter(x)
    (g,) = ad.grad(ad.tsum(w), [w])
    np.testing.assert_array_equal(g.data, np.ones_like(x))


def test_second_derivative_of_cube():
    w = ad.parameter(2.0)
    with ad.enable_grad():
        (g,) = ad.grad(ad.mul(ad.mul(w, w), w), [w], create_graph=True)
        assert g.requires_grad
        (gg,) = ad.grad(ad.mul(g, 1.0), [w])
    assert gg.item() == pytest.approx(12.0, abs=1e-12)


def test_grad_requires_scalar():
    w = ad.parameter(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.grad(ad.mul(w, 2.0), [w])


def test_unreachable_wrt_warns_and_returns_zeros():
    w = ad.parameter(np.ones(3))
    other = ad.parameter(np.ones((2, 2)))
    with pytest.warns(ad.UnusedGradientWarning):
        gw, go = ad.grad(ad.tsum(ad.mul(w, w)), [w, other])
    np.testing.assert_array_equal(gw.data, 2 * np.ones(3))
    np.testing.assert_array_equal(go.data, np.zeros((2, 2)))


def test_abs_subgradient_at_zero_is_zero():
    w = ad.parameter(np.array([-1.0, 0.0, 2.0]))
    (g,) = ad.grad(ad.tsum(ad.abs_(w)), [w])
    np.testing.assert_array_equal(g.data, [-1.0, 0.0, 1.0])


def test_no_grad_records_nothing():
    w = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = ad.mul(w, w)
    assert not y.requires_grad and y.op is None


@given(st.floats(-4, 4))
@settings(max_examples=40)
def test_gelu_higher_derivatives_match_fd(x):
    """Third derivative through two nested create_graph passes vs FD of the second."""

    def second(x0):
        w = ad.parameter(x0)
        with ad.enable_grad():
            (g,) = ad.grad(ad.gelu(w), [w], create_graph=True)
            (gg,) = ad.grad(g, [w], create_graph=True)
        return gg, w

    gg, w = second(x)
    with ad.enable_grad():
        (ggg,) = ad.grad(gg, [w])
    h = 1e-4
    fd = (second(x + h)[0].item() - second(x - h)[0].item()) / (2 * h)
    assert ggg.item() == pytest.approx(fd, rel=1e-5, abs=1e-7)


# ---------------------------------------------------------------------------
# hvp and finite differences


def test_hvp_identity_hessian():
    v = [np.array([0.3, -1.2, 2.0])]
    w = [ad.parameter(np.array([1.0, 2.0, 3.0]))]
    out = ad.hvp(lambda ws: ad.mul(ad.tsum(ad.mul(ws[0], ws[0])), 0.5), w, v)
    np.testing.assert_allclose(out[0].data, v[0], rtol=0, atol=1e-15)


def test_hvp_diagonal_quadratic():
    d = ad.constant(np.array([2.0, 3.0]))
    w = [ad.parameter(np.array([0.5, -0.5]))]
    out = ad.hvp(lambda ws: ad.mul(ad.tsum(ad.mul(d, ad.mul(ws[0], ws[0]))), 0.5), w, [np.ones(2)])
    np.testing.assert_allclose(out[0].data, [2.0, 3.0], atol=1e-15)


def test_hvp_non_scalar_loss():
    w = [ad.parameter(np.ones(2))]
    with pytest.raises(ad.ShapeError):
        ad.hvp(lambda ws: ad.mul(ws[0], 2.0), w, [np.ones(2)])


def _mlp_loss(x, y):
    def build(ws):
        h = ad.tanh(ad.matmul(ad.constant(x), ws[0]))
        h = ad.gelu(ad.matmul(h, ws[1]))
        out = ad.matmul(h, ws[2])
        r = ad.sub(out, ad.constant(y))
        return ad.mean(ad.mul(r, r))

    return build


def test_hvp_three_layer_mlp_matches_fd_of_gradients():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
    build = _mlp_loss(x, y)
    base = [rng.standard_normal((4, 5)) * 0.5, rng.standard_normal((5, 3)) * 0.5, rng.standard_normal((3, 2)) * 0.5]
    v = [rng.standard_normal(a.shape) for a in base]
    hv = ad.hvp(build, [ad.parameter(a) for a in base], v)
    h = 1e-4

    def g(shift):
        ws = [ad.parameter(a + shift * d) for a, d in zip(base, v)]
        return [t.data for t in ad.grad(build(ws), ws)]

    fd = [(a - b) / (2 * h) for a, b in zip(g(h), g(-h))]
    assert rel_err([t.data for t in hv], fd) <= 1e-5


def test_finite_diff_square():
    fd = ad.finite_diff_grad(lambda ws: ad.mul(ws[0], ws[0]), [ad.tensor(3.0)], step=1e-4)
    assert fd[0].item() == pytest.approx(6.0, abs=1e-7)


def test_finite_diff_exp_at_zero():
    fd = ad.finite_diff_grad(lambda ws: ad.exp(ws[0]), [ad.tensor(0.0)], step=1e-4)
    assert fd[0].item() == pytest.approx(1.0, abs=1e-8)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda ws: ws[0], [ad.tensor(1.0)], step=0.0)


def test_random_composites_small_sample():
    assert grad_suite(n=20, seed=11).passed
    assert hvp_suite(n=10, seed=12).passed


# ---------------------------------------------------------------------------
# graph structure


def test_graph_acyclic_and_replay_exact():
    rng = np.random.default_rng(3)
    for _ in range(20):
        c = random_composite(rng)
        ws = [ad.parameter(p) for p in c.params]
        with ad.enable_grad():
            out = c.builder(ws)
        graph = ad.Graph.capture(out)
        assert graph.is_acyclic()
        assert {id(x) for x in ws} >= {id(x) for x in graph.leaves() if x.requires_grad}
        assert ad.replay(out) == out.data


def test_backward_pass_is_recorded_when_requested():
    w = ad.parameter(np.array([0.5, -1.0]))
    with ad.enable_grad():
        (g,) = ad.grad(ad.tsum(ad.gelu(w)), [w], create_graph=True)
    graph = ad.Graph.capture(g)
    assert graph.is_acyclic() and any(n.op is not None for n in graph.nodes)


def test_determinism():
    def run():
        rng = np.random.default_rng(9)
        c = random_composite(rng)
        ws = [ad.parameter(p) for p in c.params]
        return [g.data for g in ad.grad(c.builder(ws), ws, warn_unused=False)]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_sign_flip_in_a_gradient_rule_is_detected(monkeypatch):
    original = ad.OPS["mul"]

    def flipped(g, out, a, b, needs):
        ga, gb = original.backward(g, out, a, b, needs)
        return (ad.neg(ga) if ga is not None else None, gb)

    monkeypatch.setitem(ad.OPS, "mul", ad.Op("mul", original.forward, flipped))
    assert not grad_suite(n=20, seed=11).passed
