import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerdepth import autograd as ag
from steerdepth.autograd import ParameterSet, Tensor
from steerdepth.condmod import (
    CMoE,
    DCI,
    Condition,
    ConditionEmbedding,
    cmoe_forward,
    dci_forward,
    embed_condition,
    sinusoidal_features,
)


def _modules(seed=0, dim=6, hidden=10):
    ps = ParameterSet(seed)
    emb = ConditionEmbedding(ps, "emb")
    return ps, emb, CMoE(ps, "moe", dim, hidden), DCI(ps, "dci", dim)


def _x(seed=0, shape=(2, 3, 6)):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_condition_clamped():
    assert Condition(-0.3).c == 0.0
    assert Condition(1.7).c == 1.0
    assert Condition(0.25).c == 0.25


def test_sinusoidal_features_at_zero():
    assert sinusoidal_features(0.0)[0].tolist() == [0.0, 1.0] * 8


def test_embedding_deterministic():
    _, emb, _, _ = _modules()
    assert np.array_equal(embed_condition(Condition(0.3), emb).data, embed_condition(Condition(0.3), emb).data)


@pytest.mark.parametrize("seed", range(100))
def test_embedding_endpoints_differ_in_norm(seed):
    # measured with the model's parameter name "cond": smallest gap over
    # seeds 0..99 was 3.2e-3
    emb = ConditionEmbedding(ParameterSet(seed), "cond")
    gap = abs(np.linalg.norm(emb(0.0).data) - np.linalg.norm(emb(1.0).data))
    assert gap > 1e-3


def _force_router(moe: CMoE, logits):
    moe.router.weight.data[...] = 0.0
    moe.router.bias.data[...] = np.asarray(logits, dtype=float)


def test_cmoe_symmetric_router_averages_experts():
    _, emb, moe, _ = _modules()
    _force_router(moe, [0.0, 0.0])
    x = _x()
    out = cmoe_forward(x, Condition(0.4), emb, moe)
    expected = 0.5 * moe.experts[0](x).data + 0.5 * moe.experts[1](x).data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_cmoe_saturated_router_selects_expert():
    _, emb, moe, _ = _modules()
    _force_router(moe, [20.0, -20.0])
    x = _x()
    out = cmoe_forward(x, Condition(0.9), emb, moe)
    np.testing.assert_allclose(out.data, moe.experts[0](x).data, atol=1e-6)


def test_cmoe_dimension_mismatch():
    _, emb, moe, _ = _modules()
    with pytest.raises(ag.ShapeError, match="cmoe"):
        cmoe_forward(_x(shape=(2, 3, 5)), Condition(0.0), emb, moe)


def test_dci_zero_logit_gives_half_value():
    _, emb, _, dci = _modules()
    dci.query.weight.data[...] = 0.0
    x = _x()
    e = emb(np.full(2, 0.3))
    v = dci.value(e).data
    out = dci_forward(x, Condition(0.3), emb, dci)
    np.testing.assert_allclose(out.data, x.data + 0.5 * v[:, None, :], atol=1e-12)


def test_dci_zero_value_is_identity():
    _, emb, _, dci = _modules()
    dci.value.weight.data[...] = 0.0
    dci.value.bias.data[...] = 0.0
    x = _x()
    assert np.array_equal(dci_forward(x, Condition(0.6), emb, dci).data, x.data)


def test_dci_dimension_mismatch():
    _, emb, _, dci = _modules()
    with pytest.raises(ag.ShapeError, match="dci"):
        dci_forward(_x(shape=(2, 3, 4)), Condition(0.0), emb, dci)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1), st.floats(0.1, 100.0))
def test_routing_is_on_the_simplex(seed, c, scale):
    _, emb, moe, _ = _modules(seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(2, 5, 6)) * scale)
    w = moe.routing(x, emb(np.full(2, c))).data
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1), st.floats(0.01, 5.0))
def test_dci_gate_strictly_inside_unit_interval(seed, c, scale):
    _, emb, _, dci = _modules(seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(2, 5, 6)) * scale)
    g = dci.gate(x, emb(np.full(2, c))).data
    assert np.all(g > 0) and np.all(g < 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1 - 1e-6))
def test_modules_continuous_in_c(seed, c):
    _, emb, moe, dci = _modules(seed)
    x = _x(seed)
    for fn in (lambda cc: cmoe_forward(x, Condition(cc), emb, moe),
               lambda cc: dci_forward(x, Condition(cc), emb, dci)):
        a, b = fn(c).data, fn(c + 1e-6).data
        assert np.all(np.abs(a - b) < 1e-3 * (1 + np.abs(a)))


def test_modules_deterministic():
    _, emb, moe, dci = _modules(3)
    x = _x(3)
    assert np.array_equal(cmoe_forward(x, Condition(0.2), emb, moe).data,
                          cmoe_forward(x, Condition(0.2), emb, moe).data)
    assert np.array_equal(dci_forward(x, Condition(0.2), emb, dci).data,
                          dci_forward(x, Condition(0.2), emb, dci).data)
