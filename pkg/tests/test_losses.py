from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meltr import autodiff as ad
from meltr.losses import (
    DEFAULT_GAMMA,
    GAMMA_GRID,
    GAMMA_SEARCH,
    FixedCombiner,
    assemble,
    fixed_weight_combiner,
    manual_scheme,
    primary_loss,
    reg_loss,
)
from meltr.meltr_net import LossVector, MeltrConfig, MeltrNet


class ConstNet:
    """Combiner stub that always outputs ``value``."""

    n_tasks = 3

    def __init__(self, value):
        self.value = value

    def forward_batch(self, losses, task_ids=None):
        mat = ad.tensor(losses)
        rows = 1 if mat.ndim == 1 else mat.shape[0]
        return ad.tensor(np.full(rows, self.value))

    def __call__(self, losses, task_ids=None):
        return ad.mean(self.forward_batch(losses))


lv = LossVector.of([1.0, 2.0, 3.0])


def test_constants():
    assert GAMMA_GRID == (0.0, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
    assert GAMMA_SEARCH == (0.1, 0.3, 0.5)
    assert DEFAULT_GAMMA == 0.3


def test_reg_loss_examples():
    assert reg_loss(lv, ConstNet(6.0)).item() == 0.0
    assert reg_loss(lv, ConstNet(5.0)).item() == 1.0


def test_primary_loss_examples():
    net = ConstNet(5.0)
    assert primary_loss(lv, net, 0.0).item() == 1.0
    two = LossVector.of([2.0, 1.0, 1.0])  # sum 4, output 4.5 -> reg 0.5
    assert primary_loss(two, ConstNet(4.5), 0.1).item() == pytest.approx(2.05, abs=1e-15)
    with pytest.raises(ValueError):
        primary_loss(lv, net, -0.1)


def test_primary_uses_entry_with_task_id_zero():
    shuffled = LossVector([2.0, 7.0, 3.0], [1, 0, 2])
    assert primary_loss(shuffled, ConstNet(0.0), 0.0).item() == 7.0


def test_bundle_composition():
    net = MeltrNet.init(MeltrConfig(n_tasks=3), 0)
    b = assemble(lv, net, 0.3)
    assert b.reg.item() >= 0
    assert b.pri.item() == pytest.approx(1.0 + 0.3 * b.reg.item(), abs=1e-15)
    assert b.aux.item() == pytest.approx(net(np.array([[1.0, 2.0, 3.0]])).item(), abs=1e-15)


@given(st.lists(st.floats(0, 10), min_size=3, max_size=3), st.floats(-20, 20))
def test_reg_nonnegative_and_zero_iff_equal(values, out):
    r = reg_loss(LossVector.of(values), ConstNet(out)).item()
    assert r >= 0
    assert (r <= 1e-12) == (abs(out - sum(values)) <= 1e-12)


def test_reg_subgradient_zero_at_kink():
    net = MeltrNet.init(MeltrConfig(n_tasks=3, variant="linear"), 0)
    net.params["lin_w"] = ad.parameter(np.ones(3))
    net.params["lin_b"] = ad.parameter(np.zeros(()))
    gs = ad.grad(reg_loss(lv, net), net.parameters())
    for g in gs:
        np.testing.assert_array_equal(g.data, 0.0)


def test_fixed_combiner_schemes():
    assert fixed_weight_combiner(lv, [1, 1, 1]).item() == 6.0
    assert fixed_weight_combiner(lv, [1, 0, 0]).item() == 1.0
    np.testing.assert_array_equal(manual_scheme("E", 4, helpful=[1], harmful=[2]), [8, 8, 0, 1])
    np.testing.assert_array_equal(manual_scheme("A", 3), [1, 0, 0])
    np.testing.assert_array_equal(manual_scheme("D", 3, harmful=[2]), [1, 1, 0])
    with pytest.raises(ValueError):
        fixed_weight_combiner(lv, [1, 1])
    with pytest.raises(ValueError):
        manual_scheme("Z", 3)


@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
@settings(max_examples=60)
def test_fixed_combiner_is_linear(x, y, c, a, b):
    x, y = np.array(x), np.array(y)
    lhs = fixed_weight_combiner(a * x + b * y, c).item()
    rhs = a * fixed_weight_combiner(x, c).item() + b * fixed_weight_combiner(y, c).item()
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_fixed_combiner_respects_task_ids():
    comb = FixedCombiner([1.0, 10.0, 100.0])
    out = comb.forward_batch(np.array([[1.0, 2.0, 3.0]]), np.array([2, 0, 1])).item()
    assert out == 1.0 * 100.0 + 2.0 * 1.0 + 3.0 * 10.0
    assert comb.parameters() == []
