import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from steerdepth import autograd as ag
from steerdepth import gradsuite
from steerdepth.autograd import (
    SGD,
    Adam,
    CheckpointError,
    MissingGradientError,
    Parameter,
    ParameterSet,
    Tensor,
    finite_diff_check,
    forward_op,
    load_checkpoint,
    save_checkpoint,
)


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def test_add_elementwise():
    out = forward_op("add", [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
    assert out.data.tolist() == [4.0, 6.0]


def test_softmax_symmetric():
    assert forward_op("softmax-lastdim", [Tensor([0.0, 0.0])]).data.tolist() == [0.5, 0.5]


def test_matmul_counts():
    out = forward_op("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))])
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ag.ShapeError, match=r"add: shapes \(2,\) and \(3,\)"):
        ag.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ag.ShapeError, match="matmul"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_strict_mode_rejects_non_finite():
    bad = Tensor([1.0, np.nan])
    ag.relu(bad)  # permissive by default
    with ag.strict_mode():
        with pytest.raises(ag.NonFiniteError, match="relu"):
            ag.relu(bad)


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op kind"):
        forward_op("tanh", [Tensor([0.0])])


def test_backward_square_sum():
    x = leaf([1.0, 2.0, 3.0])
    ag.sum_(x * x).backward()
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_sigmoid_at_zero():
    x = leaf([0.0])
    ag.sum_(ag.sigmoid(x)).backward()
    assert x.grad[0] == pytest.approx(0.25)


def test_backward_requires_scalar_root():
    x = leaf([1.0, 2.0])
    with pytest.raises(ag.NonScalarRootError):
        (x * 2.0).backward()


def test_backward_accumulates_without_zero_grad():
    x = leaf([1.0, -2.0])
    ag.sum_(x * x).backward()
    ag.sum_(x * x).backward()
    assert x.grad.tolist() == [4.0, -8.0]


def test_backward_visits_shared_nodes_once():
    x = leaf([3.0])
    y = x * x
    z = y + y  # y has two consumers
    ag.sum_(z).backward()
    assert x.grad.tolist() == [12.0]


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(2, 5, 5, 3)))
    w = leaf(rng.normal(size=(3, 3, 3, 4)))

    def grads():
        x.grad = w.grad = None
        ag.mean(ag.relu(ag.conv2d(x, w, 2))).backward()
        return x.grad.copy(), w.grad.copy()

    a, b = grads(), grads()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_no_grad_records_no_graph():
    x = leaf([1.0])
    with ag.no_grad():
        y = x * 2.0
    assert y.op is None and not y.requires_grad


def _random_mlp(seed: int):
    ps = ParameterSet(seed)
    w1 = ps.normal("w1", (3, 1), 1.0)
    w2 = ps.normal("w2", (1, 1), 1.0)
    b = ps.normal("b", (1,), 1.0)
    x = Tensor(np.random.default_rng(seed).normal(size=(4, 3)))

    def f():
        h = ag.sigmoid(ag.matmul(x, w1))
        y = ag.matmul(h, w2) + ag.broadcast(b, (4, 1))
        return ag.mean(y * y)

    return list(ps), f


def test_five_parameter_mlp_matches_finite_differences():
    params, f = _random_mlp(11)
    assert sum(p.data.size for p in params) == 5
    report = finite_diff_check(f, params, h=1e-5, tol=1e-4)
    assert report.passed, report.errors


def test_finite_diff_check_square():
    p = Parameter("p", leaf([3.0]))
    report = finite_diff_check(lambda: ag.sum_(p.tensor * p.tensor), [p], h=1e-5, tol=1e-4)
    assert report.passed
    assert report.errors["p"] < 1e-8


def test_finite_diff_check_dead_relu():
    p = Parameter("p", leaf([-2.0, -1.0]))
    report = finite_diff_check(lambda: ag.sum_(ag.relu(p.tensor)), [p])
    assert report.passed and report.errors["p"] == 0.0


@pytest.mark.parametrize("kind", ag.OP_KINDS)
def test_op_gradients_over_100_random_trials(kind):
    result = gradsuite.check_op(kind, trials=100, seed=1)
    assert result.passed, result.line()


@pytest.mark.parametrize("name", ["cmoe", "dci", "embedding", "cost_volume", "soft_argmax"])
def test_module_gradients(name):
    result = gradsuite.check_module(name, seed=2)
    assert result.passed, result.line()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    y = ag.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


def test_sgd_step():
    p = Parameter("p", leaf([1.0]))
    p.tensor.grad = np.array([2.0])
    opt = SGD([p], lr=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad.tolist() == [2.0]  # gradients survive the step


def test_zero_gradient_is_fixed_point():
    p = Parameter("p", leaf([1.5]))
    p.tensor.grad = np.zeros(1)
    opt = Adam([p], lr=0.1)
    opt.step()
    assert p.data[0] == 1.5


def test_adam_first_step():
    p = Parameter("p", leaf([0.0]))
    p.tensor.grad = np.array([1.0])
    opt = Adam([p], lr=0.001)
    opt.step()
    # m_hat = v_hat = 1 at t=1, so the step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.001 / (1.0 + 1e-8), rel=1e-12)
    assert opt.state.step == 1


def test_missing_gradient_lists_names():
    a = Parameter("layer.a", leaf([1.0]))
    b = Parameter("layer.b", leaf([1.0]))
    a.tensor.grad = np.ones(1)
    with pytest.raises(MissingGradientError, match="layer.b"):
        Adam([a, b]).step()


def test_frozen_parameter_not_updated():
    p = Parameter("frozen", Tensor([1.0]), trainable=False)
    q = Parameter("q", leaf([1.0]))
    q.tensor.grad = np.ones(1)
    SGD([p, q], lr=1.0).step()
    assert p.data[0] == 1.0 and q.data[0] == 0.0


def test_duplicate_parameter_names_rejected():
    ps = ParameterSet()
    ps.zeros("a", (2,))
    with pytest.raises(KeyError):
        ps.zeros("a", (2,))


def test_checkpoint_roundtrip(tmp_path):
    state = {"enc.w": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5), "émoji": np.ones(1)}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, state)
    raw = path.read_bytes()
    assert raw[:4] == b"STDP"
    loaded = load_checkpoint(path)
    assert list(loaded) == list(state)
    for k in state:
        np.testing.assert_array_equal(loaded[k], state[k])


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_conv_stride_two_shape():
    out = ag.conv2d(Tensor(np.zeros((1, 64, 64, 1))), Tensor(np.zeros((3, 3, 1, 4))), stride=2)
    assert out.shape == (1, 32, 32, 4)


def test_upsample_preserves_constants():
    out = ag.upsample2x(Tensor(np.full((1, 3, 5, 2), 1.7)))
    np.testing.assert_allclose(out.data, 1.7)
    assert out.shape == (1, 6, 10, 2)


def test_correlation_zero_padding():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(1, 2, 6, 3)))
    vol = ag.correlation(a, a, 3).data
    assert np.all(vol[:, :, 0, 1:] == 0.0)
    assert np.all(vol[:, :, 2, 3] == 0.0)
    np.testing.assert_allclose(vol[..., 0], (a.data ** 2).sum(-1))
    assert math.isclose(vol[0, 1, 4, 2], float(a.data[0, 1, 4] @ a.data[0, 1, 2]))
