"""Finite-difference gradient checks for every op kind and composite module."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ParameterSet, Tensor, finite_diff_check
from .condmod import CMoE, DCI, ConditionEmbedding
from .scenegen import SceneConfig, generate_scene
from .stereonet import ModelConfig, StereoNet, build_cost_volume, soft_argmax_disparity
from .supervise import LossWeights, build_target, compute_loss

OP_TOL = 1e-4
MODULE_TOL = 1e-4
END_TO_END_TOL = 1e-3

Case = tuple[list[Parameter], Callable[[], Tensor]]


@dataclass
class CheckResult:
    name: str
    group: str
    max_error: float
    tol: float
    trials: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.group:<6} {self.name:<22} max_rel_err={self.max_error:.3e} "
                f"tol={self.tol:g} trials={self.trials} ({self.seconds:.2f}s)")


def _leaf(name: str, values: np.ndarray) -> Parameter:
    return Parameter(name, Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name))


def _away_from(rng: np.random.Generator, shape, kinks=(0.0,), margin: float = 0.05, scale: float = 1.0):
    """Random values at least ``margin`` from every kink so central differences are exact-ish."""
    x = rng.normal(0.0, scale, size=shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, k + np.sign(x - k + 1e-300) * (margin + rng.random(shape)), x)
    return x


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return ag.sum_(out * Tensor(w))


def op_case(kind: str, rng: np.random.Generator) -> Case:
    """Random inputs (<= 64 elements each) and a scalar ``sum(op(...) * w)``."""
    n = lambda *shape: rng.normal(size=shape)  # noqa: E731
    if kind in ("add", "sub", "mul"):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        a, b = _leaf("a", n(*shape)), _leaf("b", n(*shape))
        fn = {"add": ag.add, "sub": ag.sub, "mul": ag.mul}[kind]
        op = lambda: fn(a.tensor, b.tensor)  # noqa: E731
        params = [a, b]
    elif kind == "matmul":
        lead = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
        k, m = rng.integers(1, 5, size=2)
        a, b = _leaf("a", n(*lead, k)), _leaf("b", n(k, m))
        op = lambda: ag.matmul(a.tensor, b.tensor)  # noqa: E731
        params = [a, b]
    elif kind == "conv2d-3x3":
        stride = int(rng.integers(1, 3))
        x = _leaf("x", n(1, int(rng.integers(2, 5)), int(rng.integers(2, 5)), 2))
        w = _leaf("w", n(3, 3, 2, 2))
        op = lambda: ag.conv2d(x.tensor, w.tensor, stride)  # noqa: E731
        params = [x, w]
    elif kind in ("relu", "abs"):
        x = _leaf("x", _away_from(rng, (int(rng.integers(1, 8)), 4)))
        fn = ag.relu if kind == "relu" else ag.abs_
        op = lambda: fn(x.tensor)  # noqa: E731
        params = [x]
    elif kind == "clamp":
        x = _leaf("x", _away_from(rng, (int(rng.integers(1, 8)), 4), kinks=(-0.5, 0.5)))
        op = lambda: ag.clamp(x.tensor, -0.5, 0.5)  # noqa: E731
        params = [x]
    elif kind in ("sigmoid", "softplus", "softmax-lastdim"):
        x = _leaf("x", 2.0 * n(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        fn = {"sigmoid": ag.sigmoid, "softplus": ag.softplus, "softmax-lastdim": ag.softmax}[kind]
        op = lambda: fn(x.tensor)  # noqa: E731
        params = [x]
    elif kind in ("mean", "sum"):
        x = _leaf("x", n(2, 3, 4))
        axis = [None, 0, -1, (0, 2)][int(rng.integers(4))]
        keep = bool(rng.integers(2))
        fn = ag.mean if kind == "mean" else ag.sum_
        op = lambda: fn(x.tensor, axis=axis, keepdims=keep)  # noqa: E731
        params = [x]
    elif kind == "concat-lastdim":
        k = int(rng.integers(2, 4))
        params = [_leaf(f"x{i}", n(2, 3, int(rng.integers(1, 4)))) for i in range(k)]
        op = lambda: ag.concat([p.tensor for p in params])  # noqa: E731
    elif kind == "slice":
        x = _leaf("x", n(4, 5, 3))
        lo = int(rng.integers(0, 3))
        index = (slice(lo, None), slice(None, None, int(rng.integers(1, 3))), int(rng.integers(0, 3)))
        op = lambda: ag.slice_(x.tensor, index)  # noqa: E731
        params = [x]
    elif kind == "broadcast":
        x = _leaf("x", n(3, 1))
        op = lambda: ag.broadcast(x.tensor, (2, 3, 4))  # noqa: E731
        params = [x]
    elif kind == "reshape":
        x = _leaf("x", n(2, 3, 4))
        op = lambda: ag.reshape(x.tensor, (4, 6))  # noqa: E731
        params = [x]
    elif kind == "upsample2x":
        x = _leaf("x", n(1, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2))
        op = lambda: ag.upsample2x(x.tensor)  # noqa: E731
        params = [x]
    elif kind == "correlation":
        shape = (1, 2, int(rng.integers(2, 6)), 3)
        a, b = _leaf("left", n(*shape)), _leaf("right", n(*shape))
        md = int(rng.integers(0, 4))
        op = lambda: ag.correlation(a.tensor, b.tensor, md, scale=0.7)  # noqa: E731
        params = [a, b]
    else:
        raise ValueError(f"no gradcheck case for op kind {kind!r}")
    weights = rng.normal(size=op().shape)
    return params, lambda: _weighted_sum(op(), weights)


def check_op(kind: str, trials: int = 100, seed: int = 0, tol: float = OP_TOL) -> CheckResult:
    rng = np.random.default_rng([seed, ag.OP_KINDS.index(kind)])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        params, f = op_case(kind, rng)
        worst = max(worst, finite_diff_check(f, params, h=1e-5, tol=tol).max_error)
    return CheckResult(kind, "op", worst, tol, trials, time.perf_counter() - t0)


# -- composite modules -------------------------------------------------------

def _tiny_model_config(**overrides) -> ModelConfig:
    base = dict(features=8, d_max=4, refine_iters=2, hidden=8, refine_features=4,
                refine_hidden=6, cond_dim=4, attn_dim=4, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


def _tiny_scene(seed: int):
    cfg = SceneConfig(width=16, height=16, d_max=4.0, d_bg_lo=0.5, d_bg_hi=1.5,
                      d_fg_lo=2.5, d_fg_hi=3.5, coverage_lo=0.3, coverage_hi=0.5,
                      octaves=2, texture_cell=4.0)
    return generate_scene(cfg, seed)


def _randomize(params: ParameterSet, rng: np.random.Generator, scale: float = 0.3) -> None:
    # zero-initialised heads would make upstream gradients vanish and the check vacuous
    for p in params:
        p.tensor.data = p.data + scale * rng.normal(size=p.data.shape)


def _embedding_case(rng) -> Case:
    ps = ParameterSet(int(rng.integers(1 << 30)))
    emb = ConditionEmbedding(ps, "cond", 4)
    w = rng.normal(size=(3, 4))
    cs = rng.random(3)
    return list(ps), lambda: _weighted_sum(emb(cs), w)


def _cmoe_case(rng) -> Case:
    ps = ParameterSet(int(rng.integers(1 << 30)))
    emb = ConditionEmbedding(ps, "cond", 4)
    moe = CMoE(ps, "moe", 4, 6, cond_dim=4, n_experts=2)
    x = _leaf("x", rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 3, 4))
    c = rng.random(2)
    return [x] + list(ps), lambda: _weighted_sum(moe(x.tensor, emb(c)), w)


def _dci_case(rng) -> Case:
    ps = ParameterSet(int(rng.integers(1 << 30)))
    emb = ConditionEmbedding(ps, "cond", 4)
    dci = DCI(ps, "dci", 4, cond_dim=4, attn_dim=3)
    x = _leaf("x", rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 3, 4))
    c = rng.random(2)
    return [x] + list(ps), lambda: _weighted_sum(dci(x.tensor, emb(c)), w)


def _cost_volume_case(rng) -> Case:
    fl = _leaf("left_feats", rng.normal(size=(1, 3, 6, 4)))
    fr = _leaf("right_feats", rng.normal(size=(1, 3, 6, 4)))
    w = rng.normal(size=(1, 3, 6, 3))
    return [fl, fr], lambda: _weighted_sum(build_cost_volume(fl.tensor, fr.tensor, 2), w)


def _soft_argmax_case(rng) -> Case:
    logits = _leaf("logits", rng.normal(size=(1, 3, 4, 5)))
    w = rng.normal(size=(1, 6, 8, 1))
    return [logits], lambda: _weighted_sum(soft_argmax_disparity(logits.tensor)[0], w)


def _select(model: StereoNet, *prefixes: str) -> list[Parameter]:
    return [p for p in model.params if p.name.startswith(prefixes)]


class _ModelCases:
    """Cases that need a (randomised) tiny model and a 16x16 scene."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.sample = _tiny_scene(int(rng.integers(1 << 30)))
        self.model = StereoNet(_tiny_model_config())
        _randomize(self.model.params, rng)
        self.left = self.sample.left[None].astype(np.float64)
        self.right = self.sample.right[None].astype(np.float64)
        self.c = np.array([0.3])
        self.target = build_target(self.sample, 0.3)
        with ag.no_grad():
            self.feats_l = self.model.extract_features(self.left).data
            self.feats_r = self.model.extract_features(self.right).data

    def encoder(self) -> Case:
        m, left = self.model, self.left
        w = self.rng.normal(size=(1, 8, 8, 8))
        return _select(m, "encoder."), lambda: _weighted_sum(m.extract_features(left), w)

    def fusion(self) -> Case:
        m, c = self.model, self.c
        vol = _leaf("volume", build_cost_volume(Tensor(self.feats_l), Tensor(self.feats_r), 2).data)
        feats = _leaf("feats", self.feats_l)
        w = self.rng.normal(size=(1, 8, 8, 8))
        params = [vol, feats] + _select(m, "fusion.proj", "fusion.dci", "fusion.moe", "cond.")
        return params, lambda: _weighted_sum(m.conditional_fusion(vol.tensor, feats.tensor, m.embed(c)), w)

    def refinement(self) -> Case:
        m, c, feats = self.model, self.c, Tensor(self.feats_l)
        disp = _leaf("disparity", 0.5 + 3.0 * self.rng.random((1, 16, 16, 1)))
        w = self.rng.normal(size=(1, 16, 16, 1))
        params = [disp] + _select(m, "refine0.", "cond.")
        return params, lambda: _weighted_sum(m.refine(disp.tensor, feats, m.embed(c), 0), w)

    def seg_head(self) -> Case:
        m, feats = self.model, Tensor(self.feats_l)
        w = self.rng.normal(size=(1, 16, 16))
        return _select(m, "seg."), lambda: _weighted_sum(m.seg_head(feats), w)

    def loss(self) -> Case:
        target, mask = self.target, self.sample.mask[None]
        rng = self.rng
        iters = [_leaf(f"disp{t}", target.target[None] + rng.choice([-1, 1], size=(1, 16, 16))
                       * (0.1 + rng.random((1, 16, 16)))) for t in range(3)]
        seg = _leaf("seg_logits", rng.normal(size=(1, 16, 16)))
        return iters + [seg], lambda: compute_loss(
            [d.tensor for d in iters], seg.tensor, [target], mask, LossWeights(1.0, 0.2))

    def end_to_end(self) -> Case:
        m, left, right, c = self.model, self.left, self.right, self.c
        target, mask = self.target, self.sample.mask[None]

        def f() -> Tensor:
            pred = m.forward(left, right, c)
            return compute_loss(pred.iterations, pred.seg_logits, [target], mask)

        return list(m.params), f


MODULE_NAMES = ("embedding", "cmoe", "dci", "encoder", "cost_volume", "fusion", "soft_argmax",
                "refinement", "seg_head", "loss", "end_to_end_16x16")


def module_cases(seed: int = 0) -> dict[str, tuple[Case, float, int | None]]:
    """name -> ((params, f), tol, max_entries per parameter)."""
    rng = np.random.default_rng(seed)
    mc = _ModelCases(rng)
    return {
        "embedding": (_embedding_case(rng), MODULE_TOL, None),
        "cmoe": (_cmoe_case(rng), MODULE_TOL, None),
        "dci": (_dci_case(rng), MODULE_TOL, None),
        "encoder": (mc.encoder(), MODULE_TOL, 6),
        "cost_volume": (_cost_volume_case(rng), MODULE_TOL, None),
        "fusion": (mc.fusion(), MODULE_TOL, 6),
        "soft_argmax": (_soft_argmax_case(rng), MODULE_TOL, None),
        "refinement": (mc.refinement(), MODULE_TOL, 6),
        "seg_head": (mc.seg_head(), MODULE_TOL, None),
        "loss": (mc.loss(), MODULE_TOL, None),
        "end_to_end_16x16": (mc.end_to_end(), END_TO_END_TOL, 3),
    }


def check_module(name: str, seed: int = 0) -> CheckResult:
    (params, f), tol, max_entries = module_cases(seed)[name]
    t0 = time.perf_counter()
    rep = finite_diff_check(f, params, h=1e-5, tol=tol, max_entries=max_entries, seed=seed)
    return CheckResult(name, "module", rep.max_error, tol, 1, time.perf_counter() - t0)


def run_all(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    results = [check_op(kind, trials=trials, seed=seed) for kind in ag.OP_KINDS]
    cases = module_cases(seed)
    for name in MODULE_NAMES:
        (params, f), tol, max_entries = cases[name]
        t0 = time.perf_counter()
        rep = finite_diff_check(f, params, h=1e-5, tol=tol, max_entries=max_entries, seed=seed)
        results.append(CheckResult(name, "module", rep.max_error, tol, 1, time.perf_counter() - t0))
    return results
