from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meltr import autodiff as ad
from meltr.gradcheck import rel_err
from meltr.meltr_net import (
    LossVector,
    MeltrConfig,
    MeltrNet,
    mixed_second_difference,
    meltr_forward,
    probe_partials,
    scale_embed,
    surface_2d,
    sweep_surface,
    task_embed,
)
from meltr.losses import FixedCombiner

# ---------------------------------------------------------------------------
# independent numpy reference, written with explicit loops


def _gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def _norm(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        mu = sum(x[r]) / x.shape[1]
        var = sum((v - mu) ** 2 for v in x[r]) / x.shape[1]
        out[r] = (x[r] - mu) / math.sqrt(var + eps)
    return out * g + b


def ref_scale_embed(p, loss):
    h = _gelu(loss * p["se_w1"][0] + p["se_b1"])
    return h @ p["se_w2"] + p["se_b2"]


def ref_forward(p, losses, ids, d, heads):
    n = len(losses)
    x = np.stack([ref_scale_embed(p, v) + p["te"][t] for v, t in zip(losses, ids)])
    z = _norm(x, p["l0_ln1_g"], p["l0_ln1_b"])
    q = z @ p["l0_wq"] + p["l0_bq"]
    k = z @ p["l0_wk"] + p["l0_bk"]
    v = z @ p["l0_wv"] + p["l0_bv"]
    dk = d // heads
    att = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n):
            scores = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dk) for j in range(n)]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            weights = [a / sum(e) for a in e]
            att[i, sl] = sum(wj * v[j, sl] for j, wj in enumerate(weights))
    x = x + att @ p["l0_wo"] + p["l0_bo"]
    z = _norm(x, p["l0_ln2_g"], p["l0_ln2_b"])
    x = x + _gelu(z @ p["l0_ff_w1"] + p["l0_ff_b1"]) @ p["l0_ff_w2"] + p["l0_ff_b2"]
    pooled = x.mean(axis=0)
    return float(pooled @ p["head_w"][:, 0] + p["head_b"][0])


def _net(n_tasks=3, seed=0, **kw) -> MeltrNet:
    return MeltrNet.init(MeltrConfig(n_tasks=n_tasks, **kw), seed)


def _perturbed(net: MeltrNet, seed=1, scale=0.3) -> MeltrNet:
    """Move every weight away from its (near-trivial) initialization."""
    rng = np.random.default_rng(seed)
    return MeltrNet(net.config, {k: v + scale * rng.standard_normal(v.shape) for k, v in net.state().items()})


# ---------------------------------------------------------------------------
# config and loss vectors


def test_config_validation():
    with pytest.raises(ValueError):
        MeltrConfig(n_tasks=3, d=30, heads=4)
    with pytest.raises(ValueError):
        MeltrConfig(n_tasks=0)
    with pytest.raises(ValueError):
        MeltrConfig(n_tasks=2, variant="deep")
    big = MeltrConfig.paper_scale(4)
    assert (big.d, big.heads, big.layers) == (512, 8, 1)
    small = MeltrConfig(n_tasks=4)
    assert (small.d, small.heads, small.layers) == (32, 4, 1)


def test_loss_vector_invariants():
    with pytest.raises(ValueError):
        LossVector.of([])
    with pytest.raises(ValueError):
        LossVector.of([1.0, np.nan])
    with pytest.raises(ValueError):
        LossVector([1.0, 2.0], [0])


def test_table_shapes():
    net = _net(n_tasks=5)
    assert net.params["te"].shape == (5, 32)
    assert net.params["l0_ff_w1"].shape == (32, 128)


# ---------------------------------------------------------------------------
# scale and task embeddings


def test_zero_scale_mlp_gives_zero_vector():
    net = _net()
    for k in ("se_w1", "se_b1", "se_w2", "se_b2"):
        net.params[k] = ad.parameter(np.zeros_like(net.params[k].data))
    np.testing.assert_array_equal(scale_embed(net, 3.7).data, np.zeros(32))


def test_scale_embed_matches_reference_seed_42():
    net = _net(seed=42)
    got = scale_embed(net, 0.5).data
    np.testing.assert_allclose(got, ref_scale_embed(net.state(), 0.5), rtol=1e-12, atol=1e-14)


def test_scale_embed_derivative_matches_fd():
    net = _net(seed=42)
    x = ad.parameter(1.0)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(32)
    (g,) = ad.grad(ad.vdot([scale_embed(net, x)], [ad.constant(u)]), [x])
    h = 1e-5
    fd = (scale_embed(net, 1.0 + h).data @ u - scale_embed(net, 1.0 - h).data @ u) / (2 * h)
    assert rel_err(g.data, fd) <= 1e-5


def test_scale_embed_rejects_non_finite():
    with pytest.raises(ValueError):
        scale_embed(_net(), np.inf)


def test_task_embed_lookup_and_locality():
    net = _net(n_tasks=4)
    np.testing.assert_array_equal(task_embed(net, 0).data, net.params["te"].data[0])
    before = task_embed(net, 1).data.copy()
    te = net.params["te"].data.copy()
    te[2] += 1.0
    net.params["te"] = ad.parameter(te)
    np.testing.assert_array_equal(task_embed(net, 1).data, before)
    with pytest.raises(IndexError):
        task_embed(net, 4)


def test_unused_task_row_gets_zero_gradient():
    net = _net(n_tasks=4)
    out = meltr_forward(LossVector([0.3, 0.9], [0, 1]), net)
    (g,) = ad.grad(out, [net.params["te"]])
    np.testing.assert_array_equal(g.data[2:], 0.0)
    assert np.abs(g.data[:2]).max() > 0


# ---------------------------------------------------------------------------
# forward pass


def test_forward_matches_reference_with_explicit_attention():
    net = _perturbed(_net(n_tasks=2, seed=42))
    got = meltr_forward(LossVector([0.5, 0.5], [0, 1]), net).item()
    want = ref_forward(net.state(), [0.5, 0.5], [0, 1], 32, 4)
    assert got == pytest.approx(want, rel=1e-10, abs=1e-12)


def test_forward_matches_reference_on_three_losses():
    net = _perturbed(_net(n_tasks=3, seed=5), seed=2)
    got = meltr_forward(LossVector([0.1, 2.0, 0.7], [2, 0, 1]), net).item()
    assert got == pytest.approx(ref_forward(net.state(), [0.1, 2.0, 0.7], [2, 0, 1], 32, 4), rel=1e-10, abs=1e-12)


def test_batch_forward_equals_per_sample():
    net = _perturbed(_net())
    mat = np.random.default_rng(0).uniform(0, 2, (5, 3))
    batch = net.forward_batch(mat).data
    single = [meltr_forward(LossVector.of(row), net).item() for row in mat]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_example_permutation():
    net = _perturbed(_net())
    a = meltr_forward(LossVector([1.0, 2.0, 3.0], [0, 1, 2]), net).item()
    b = meltr_forward(LossVector([2.0, 3.0, 1.0], [1, 2, 0]), net).item()
    assert abs(a - b) <= 1e-10


@given(st.lists(st.floats(0, 5), min_size=4, max_size=4), st.permutations(range(4)))
@settings(max_examples=40, deadline=None)
def test_joint_permutation_invariance(values, perm):
    net = _perturbed(_net(n_tasks=4, seed=3))
    lv = LossVector.of(values)
    assert abs(meltr_forward(lv, net).item() - meltr_forward(lv.permuted(perm), net).item()) <= 1e-10


@given(st.lists(st.floats(0, 5), min_size=3, max_size=3), st.permutations(range(3)))
@settings(max_examples=30, deadline=None)
def test_se_only_ignores_task_identity(values, perm):
    net = _perturbed(_net(variant="se_only"))
    a = meltr_forward(LossVector(values, [0, 1, 2]), net).item()
    b = meltr_forward(LossVector(np.asarray(values)[list(perm)], [0, 1, 2]), net).item()
    assert abs(a - b) <= 1e-10


@given(st.lists(st.floats(0, 5), min_size=3, max_size=3))
@settings(max_examples=20, deadline=None)
def test_te_only_has_zero_partials(values):
    net = _perturbed(_net(variant="te_only"))
    np.testing.assert_array_equal(probe_partials(LossVector.of(values), net), 0.0)


def test_forward_rejects_bad_ids():
    net = _net(n_tasks=3)
    with pytest.raises(IndexError):
        net.forward_batch(np.ones((1, 3)), np.array([0, 1, 3]))


# ---------------------------------------------------------------------------
# partials and surfaces


def test_partials_match_fd():
    net = _perturbed(_net(n_tasks=4, seed=8))
    base = np.array([0.4, 1.3, 0.8, 2.1])
    got = probe_partials(LossVector.of(base), net)
    h = 1e-5
    fd = np.zeros(4)
    for t in range(4):
        e = np.zeros(4)
        e[t] = h
        fd[t] = (meltr_forward(LossVector.of(base + e), net).item()
                 - meltr_forward(LossVector.of(base - e), net).item()) / (2 * h)
    assert rel_err(got, fd) <= 1e-5


def test_zero_scale_mlp_gives_zero_partials_and_flat_sweep():
    net = _perturbed(_net())
    for k in ("se_w1", "se_b1", "se_w2", "se_b2"):
        net.params[k] = ad.parameter(np.zeros_like(net.params[k].data))
    np.testing.assert_array_equal(probe_partials(LossVector.of([1.0, 2.0, 0.5]), net), 0.0)
    outs = [r[2] for r in sweep_surface(net, 1)]
    assert max(outs) - min(outs) <= 1e-12  # flat up to batched-BLAS reassociation


def test_sweep_default_grid():
    rows = sweep_surface(_net(), 0)
    assert len(rows) == 31
    assert rows[0][1] == 0.0 and rows[-1][1] == 3.0
    with pytest.raises(ValueError):
        sweep_surface(_net(), 0, range_=(1.0, 1.0))
    with pytest.raises(ValueError):
        sweep_surface(_net(), 0, range_=(0.0, np.inf))
    with pytest.raises(ValueError):
        sweep_surface(_net(), 0, steps=1)


def test_linear_variant_sweep_is_affine():
    net = _perturbed(_net(variant="linear"))
    rows = np.array(sweep_surface(net, 2, baseline=[0.5, 1.0, 2.0]))
    out, partial = rows[:, 2], rows[:, 3]
    np.testing.assert_allclose(np.diff(out, 2), 0.0, atol=1e-12)
    np.testing.assert_allclose(partial, partial[0], rtol=0, atol=1e-14)


def test_surfaces_linear_vs_full():
    lin = _perturbed(_net(variant="linear"))
    full = _perturbed(_net())
    *_, g_lin = surface_2d(lin, 0, 1)
    *_, g_full = surface_2d(full, 0, 1)
    assert np.abs(mixed_second_difference(g_lin)).max() <= 1e-10
    assert np.abs(mixed_second_difference(g_full)).max() > 1e-6


def test_uniform_sum_surface_is_unit_plane():
    va, vb, grid = surface_2d(FixedCombiner(np.ones(3)), 0, 2, steps=7, baseline=[1.0, 1.0, 1.0])
    np.testing.assert_allclose(grid, va[:, None] + vb[None, :] + 1.0, atol=1e-12)


def test_surface_needs_distinct_tasks():
    with pytest.raises(ValueError):
        surface_2d(_net(), 1, 1)
