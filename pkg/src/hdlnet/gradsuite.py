"""Finite-difference gradient suite over every differentiable op.

Each case builds a scalar float64 function from a seed. Non-scalar ops are
reduced through a fixed random projection so that every output entry
contributes a distinct weight. Inputs to kinked ops (relu, max pool) are
kept away from their kinks so central differences stay valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .head import CenterBank, HdlHead, center_loss, forward_cascade, init_centers, per_level_losses, total_loss
from .tensor import Tensor, grad_check

OP_TOL = 1e-5
BN_TOL = 1e-4
MODEL_TOL = 1e-4

Case = Tuple[Callable[[], Tensor], Dict[str, Tensor]]


def _p(a: np.ndarray) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, gap=0.1):
    u = rng.standard_normal(shape)
    return np.sign(u) * (gap + np.abs(u))


def _distinct(rng, shape, gap=0.05):
    # a shuffled ladder: every pooling window has a unique, well separated max
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap).reshape(shape)


CASES: List[Tuple[str, float, Callable]] = []


def _fixed_projection(rng, y_shape):
    return Tensor(rng.standard_normal(y_shape))


def _proj_case(make_inputs, op):
    """Case builder: inputs from ``make_inputs(rng)``, loss = <op(*inputs), W>."""

    def build(rng):
        params = make_inputs(rng)
        w = _fixed_projection(rng, op(*params.values()).shape)
        return (lambda: T.sum_all(T.mul(op(*params.values()), w))), params

    return build


def _register(name, tol, builder):
    CASES.append((name, tol, builder))


_register("add", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4))), "b": _p(r.standard_normal((3, 4)))}, T.add))
_register("sub", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4))), "b": _p(r.standard_normal((3, 4)))}, T.sub))
_register("mul", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4))), "b": _p(r.standard_normal((3, 4)))}, T.mul))
_register("scale", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4)))}, lambda a: T.scale(a, -1.7)))
_register("square", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4)))}, T.square))
_register("sum_all", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4)))}, T.sum_all))
_register("mean_all", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4)))}, T.mean_all))
_register("reshape", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4)))}, lambda a: T.reshape(a, (2, 6))))
_register("relu", OP_TOL, _proj_case(lambda r: {"a": _p(_away_from_zero(r, (4, 5)))}, T.relu))
_register("matmul", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4))), "b": _p(r.standard_normal((4, 2)))}, T.matmul))
_register("transpose", OP_TOL, _proj_case(lambda r: {"a": _p(r.standard_normal((3, 4)))}, T.transpose))
_register("add_bias", OP_TOL, _proj_case(lambda r: {"x": _p(r.standard_normal((3, 4))), "b": _p(r.standard_normal(4))}, T.add_bias))
_register(
    "linear",
    OP_TOL,
    _proj_case(
        lambda r: {"x": _p(r.standard_normal((3, 4))), "w": _p(r.standard_normal((5, 4))), "b": _p(r.standard_normal(5))},
        T.linear,
    ),
)
for _stride, _pad in ((1, 0), (1, 1), (2, 1), (2, 3)):
    _register(
        f"conv2d[s={_stride},p={_pad}]",
        OP_TOL,
        _proj_case(
            lambda r: {"x": _p(r.standard_normal((2, 2, 6, 6))), "k": _p(r.standard_normal((3, 2, 3, 3)))},
            lambda x, k, s=_stride, p=_pad: T.conv2d(x, k, s, p),
        ),
    )
_register(
    "add_channel_bias",
    OP_TOL,
    _proj_case(lambda r: {"x": _p(r.standard_normal((2, 3, 2, 2))), "b": _p(r.standard_normal(3))}, T.add_channel_bias),
)
_register("max_pool2d[3/2]", OP_TOL, _proj_case(lambda r: {"x": _p(_distinct(r, (2, 2, 7, 7)))}, lambda x: T.max_pool2d(x, 3, 2)))
_register("max_pool2d[2/2]", OP_TOL, _proj_case(lambda r: {"x": _p(_distinct(r, (2, 2, 6, 6)))}, lambda x: T.max_pool2d(x, 2)))
_register("global_avg_pool", OP_TOL, _proj_case(lambda r: {"x": _p(r.standard_normal((2, 3, 4, 4)))}, T.global_avg_pool))
_register("softmax", OP_TOL, _proj_case(lambda r: {"x": _p(r.standard_normal((3, 5)))}, T.softmax))


def _bn_case(shape):
    def build(rng):
        c = shape[1]
        x = _p(rng.standard_normal(shape) * 2 + 0.5)
        g = _p(1 + 0.5 * rng.standard_normal(c))
        b = _p(rng.standard_normal(c))
        w = Tensor(rng.standard_normal(shape))

        def fn():
            out = T.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)
            return T.sum_all(T.mul(out, w))

        return fn, {"x": x, "gamma": g, "beta": b}

    return build


_register("batch_norm", BN_TOL, _bn_case((4, 3, 3, 3)))


def _ce_build(rng):
    z = _p(rng.standard_normal((6, 4)) * 2)
    y = rng.integers(0, 4, 6)
    return (lambda: T.softmax_cross_entropy(z, y)), {"logits": z}


_register("softmax_cross_entropy", OP_TOL, _ce_build)


def _center_build(rng):
    x = _p(rng.standard_normal((7, 3)))
    bank = CenterBank(4, 3)
    init_centers(bank, seed=int(rng.integers(1000)))
    y = rng.integers(0, 4, 7)
    return (lambda: center_loss(x, y, bank, accumulate=False)), {"features": x}


_register("center_loss", OP_TOL, _center_build)


def _head_build(rng):
    counts = [2, 3, 4]
    head = HdlHead(5, counts, lambdas=[0.5, 1.0, 0.7, 1.3], seed=int(rng.integers(1000)), dtype=np.float64)
    x = _p(rng.standard_normal((6, 5)))
    bank = CenterBank(4, 5, level=2)
    init_centers(bank, seed=int(rng.integers(1000)))
    labels = [rng.integers(0, n, 6) for n in counts]

    def fn():
        logits = forward_cascade(head, x)
        lc = center_loss(x, labels[2], bank, accumulate=False)
        return total_loss(lc, per_level_losses(logits, labels), head.lambdas).root

    return fn, {"features": x, **head.parameters()}


_register("hdl_head_total_loss", OP_TOL, _head_build)


def _softmax_head_case(rng):
    counts = [3, 2]
    head = HdlHead(4, counts, propagate="softmax", seed=int(rng.integers(1000)), dtype=np.float64)
    x = _p(rng.standard_normal((5, 4)))
    labels = [rng.integers(0, n, 5) for n in counts]

    def fn():
        losses = per_level_losses(forward_cascade(head, x), labels)
        return T.add(losses[0], T.scale(losses[1], 0.5))

    return fn, {"features": x, **head.parameters()}


_register("hdl_head_softmax_cascade", OP_TOL, _softmax_head_case)


# ----------------------------------------------------------------------------


@dataclass
class CaseResult:
    name: str
    tolerance: float
    max_error: float
    worst_seed: int
    n_seeds: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_op_suite(seeds: int = 20, eps: float = 1e-6) -> List[CaseResult]:
    out = []
    for case_id, (name, tol, build) in enumerate(CASES):
        worst, worst_seed = 0.0, 0
        for seed in range(seeds):
            fn, params = build(np.random.default_rng([seed, case_id]))
            err = grad_check(fn, params, eps=eps).max_error
            if err >= worst:
                worst, worst_seed = err, seed
        out.append(CaseResult(name, tol, worst, worst_seed, seeds))
    return out


FULL_MODEL_BACKBONE = BackboneConfig(input_shape=(3, 12, 12), stem_kernel=3, widths=(3, 4), residual=True)


def full_model_case(seed: int, backbone_config: BackboneConfig = FULL_MODEL_BACKBONE) -> Case:
    """Backbone + HDL head + center loss, float64, training-mode batch norm."""
    rng = np.random.default_rng([seed, 99])
    counts = [2, 3, 4]
    bb = Backbone(backbone_config, seed=seed, dtype=np.float64)
    head = HdlHead(bb.feature_dim, counts, lambdas=[0.5, 1.0, 1.0, 1.0], seed=seed + 1, dtype=np.float64)
    bank = CenterBank(4, bb.feature_dim, level=2, normalize=True)
    init_centers(bank, seed=seed + 2)
    x = Tensor(rng.random((4, *backbone_config.input_shape)))
    labels = [rng.integers(0, n, 4) for n in counts]
    buffers = {k: v.copy() for k, v in bb.buffers().items()}

    def fn():
        # running statistics are side effects; restore them so every call is identical
        for k, v in bb.buffers().items():
            v[...] = buffers[k]
        feats = bb(x, training=True)
        logits = forward_cascade(head, feats)
        lc = center_loss(feats, labels[2], bank, accumulate=False)
        return total_loss(lc, per_level_losses(logits, labels), head.lambdas).root

    return fn, {**bb.parameters(), **head.parameters()}


def run_full_model(seeds: int = 20, max_checks: int = 6, eps: float = 1e-6) -> CaseResult:
    worst, worst_seed = 0.0, 0
    for seed in range(seeds):
        fn, params = full_model_case(seed)
        err = grad_check(fn, params, eps=eps, max_checks=max_checks, seed=seed).max_error
        if err >= worst:
            worst, worst_seed = err, seed
    return CaseResult("full_model", MODEL_TOL, worst, worst_seed, seeds)


def format_result(r: CaseResult) -> str:
    status = "PASS" if r.passed else "FAIL"
    return f"{status}  {r.name:<28} max rel err {r.max_error:.2e} (tol {r.tolerance:.0e}, {r.n_seeds} seeds, worst seed {r.worst_seed})"
