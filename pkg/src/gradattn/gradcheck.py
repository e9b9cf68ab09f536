"""Finite-difference verification suite over every differentiable op.

Each case builds a random scalar objective ``sum(op(...) * R)`` in float64 and
returns ``finite_diff_check``'s max relative error. The tape of every case is
inspected so the suite can report which recorded op types it exercised.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    EncoderConfig,
    apply_learnable_pe,
    apply_rope,
    encoder_forward,
    init_encoder,
    multi_head_attention,
)
from .layers import (
    Conv2dParams,
    NormParams,
    batchnorm2d,
    conv2d,
    cross_entropy,
    global_avg_pool,
    layernorm,
    linear,
    maxpool2d,
)
from .models import WidthConfig, build_gradattn, build_resnet18_lite
from .tensor import Tensor, finite_diff_check

THRESHOLD = 1e-5

# every op name passed to tensor.record() anywhere in the package
KNOWN_OPS = frozenset({
    "add", "sub", "mul", "div", "neg", "exp", "log", "relu", "matmul", "sum", "mean", "reshape",
    "transpose", "getitem", "stack", "concat", "softmax", "log_softmax", "conv2d", "maxpool2d",
    "global_avg_pool", "linear", "batchnorm2d", "layernorm", "cross_entropy", "rope",
})


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    ops: frozenset
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    r = Tensor(rng.normal(size=out.shape))
    return T.sum_(T.mul(out, r))


def _case_elementwise(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

    def f(_):
        h = T.sub(T.mul(T.add(a, b), c), T.div(a, c))
        h = T.add(T.neg(T.exp(T.mul(h, 0.1))), T.log(c))
        h = T.concat([T.relu(h), T.reshape(T.transpose(h), (3, 4))], axis=1)
        h = T.stack([h, T.log_softmax(h, axis=1)], axis=0)
        h = T.add(T.mean(h, axis=0), T.getitem(h, 1))
        return T.add(_weighted(h, np.random.default_rng(1)), T.sum_(T.matmul(a, T.transpose(c))))

    return f, [a, b, c]


def _case_softmax(rng):
    x = _param(rng, 2, 5)
    return (lambda _: _weighted(T.softmax(x, axis=-1), np.random.default_rng(2))), [x]


def _case_conv2d(rng):
    x = _param(rng, 2, 3, 7, 7)
    p = Conv2dParams(_param(rng, 4, 3, 3, 3), _param(rng, 4), stride=2, padding=1)
    return (lambda _: _weighted(conv2d(x, p), np.random.default_rng(3))), [x, p.weight, p.bias]


def _case_maxpool(rng):
    x = _param(rng, 2, 2, 6, 6)
    return (lambda _: _weighted(maxpool2d(x, 3, 2, 1)[0], np.random.default_rng(4))), [x]


def _case_gap(rng):
    x = _param(rng, 2, 3, 4, 5)
    return (lambda _: _weighted(global_avg_pool(x), np.random.default_rng(5))), [x]


def _case_linear(rng):
    x, w, b = _param(rng, 4, 5), _param(rng, 3, 5), _param(rng, 3)
    return (lambda _: _weighted(linear(x, w, b), np.random.default_rng(6))), [x, w, b]


def _bn_params(rng, c):
    p = NormParams.init(c, batch_norm=True)
    p.gamma.data = rng.normal(1, 0.2, c)
    p.beta.data = rng.normal(0, 0.2, c)
    p.running_mean.data = rng.normal(0, 0.5, c)
    p.running_var.data = rng.uniform(0.5, 2.0, c)
    return p


def _case_bn_train(rng):
    x = _param(rng, 3, 2, 3, 3)
    p = _bn_params(rng, 2)
    return (lambda _: _weighted(batchnorm2d(x, p, True), np.random.default_rng(7))), [x, p.gamma, p.beta]


def _case_bn_eval(rng):
    x = _param(rng, 3, 2, 3, 3)
    p = _bn_params(rng, 2)
    return (lambda _: _weighted(batchnorm2d(x, p, False), np.random.default_rng(8))), [x, p.gamma, p.beta]


def _case_layernorm(rng):
    x, g, b = _param(rng, 2, 3, 6), _param(rng, 6), _param(rng, 6)
    return (lambda _: _weighted(layernorm(x, g, b), np.random.default_rng(9))), [x, g, b]


def _case_cross_entropy(rng):
    x = _param(rng, 4, 5, scale=2.0)
    y = np.array([0, 3, 4, 1])
    return (lambda _: cross_entropy(x, y)), [x]


def _case_mha(rng):
    z = _param(rng, 2, 5, 8)
    p = AttentionParams.init(rng, 8)
    ps = [z] + [t for lp in (p.q, p.k, p.v, p.o) for t in (lp.weight, lp.bias)]
    return (lambda _: _weighted(multi_head_attention(z, p, heads=2), np.random.default_rng(10))), ps


def _case_learnable_pe(rng):
    z, table = _param(rng, 2, 5, 8), _param(rng, 5, 8)
    return (lambda _: _weighted(T.relu(apply_learnable_pe(z, table)), np.random.default_rng(11))), [z, table]


def _case_rope(rng):
    q = _param(rng, 2, 2, 5, 4)
    return (lambda _: _weighted(apply_rope(q), np.random.default_rng(12))), [q]


def _encoder_case(pe):
    def case(rng):
        cfg = EncoderConfig(depth=1, heads=2, dim=8, ffn_dim=16, pe_variant=pe)
        params = init_encoder(rng, cfg)
        z = _param(rng, 2, 5, 8)
        ps = [z] + _all_params(params)
        return (lambda _: _weighted(encoder_forward(z, cfg, params), np.random.default_rng(13))), ps
    return case


def _all_params(obj) -> list:
    from .models import _walk
    return [t for _, t in _walk(obj, "p") if t.requires_grad]


def _model_case(kind):
    def case(rng):
        # batch 4: with 1x1 stage-3/4 maps, a batch of 2 gives each batch-norm channel two
        # values, and its near-sign-function curvature swamps central differences
        size, batch = (8, 4) if kind == "gradattn" else (16, 4)
        width = WidthConfig.desk(scale=1 / 8, num_classes=3, in_channels=1, input_size=size)
        if kind == "gradattn":
            model = build_gradattn(width, EncoderConfig(depth=1, heads=2, dim=16, ffn_dim=32,
                                                        pe_variant="learnable"), seed=0)
        else:
            model = build_resnet18_lite(width, seed=0)
        x = _param(rng, batch, 1, size, size)
        y = np.arange(batch) % 3
        return (lambda _: cross_entropy(model(x)[0], y)), [x, *model.params.values()]
    return case


CASES: dict[str, Callable] = {
    "elementwise": _case_elementwise,
    "softmax": _case_softmax,
    "conv2d": _case_conv2d,
    "maxpool2d": _case_maxpool,
    "global_avg_pool": _case_gap,
    "linear": _case_linear,
    "batchnorm2d_train": _case_bn_train,
    "batchnorm2d_eval": _case_bn_eval,
    "layernorm": _case_layernorm,
    "cross_entropy": _case_cross_entropy,
    "multi_head_attention": _case_mha,
    "learnable_pe": _case_learnable_pe,
    "rope": _case_rope,
    "encoder_1layer_nope": _encoder_case("nope"),
    "encoder_1layer_learnable": _encoder_case("learnable"),
    "encoder_1layer_rope": _encoder_case("rope"),
    "resnet18_tiny": _model_case("resnet18"),
    "gradattn_tiny": _model_case("gradattn"),
}

# per-tensor coordinate cap for the end-to-end models
_MAX_COORDS = {"resnet18_tiny": 4, "gradattn_tiny": 4}


def run_case(name: str, seed: int = 0) -> CaseResult:
    with T.precision("float64"):
        rng = np.random.default_rng(seed)
        f, params = CASES[name](rng)
        t0 = time.perf_counter()
        ops = frozenset(n.op for n in T.Tape.from_root(f(params)).nodes)
        err = finite_diff_check(f, params, eps=1e-6, max_coords=_MAX_COORDS.get(name), seed=seed)
        return CaseResult(name, err, ops, time.perf_counter() - t0)


def run_suite(names=None, seed: int = 0, echo=None) -> list[CaseResult]:
    results = []
    for name in names or CASES:
        res = run_case(name, seed)
        if echo:
            echo(f"{'PASS' if res.passed else 'FAIL'} {name:26s} max_rel_err={res.max_rel_error:.3e} "
                 f"({res.seconds:.2f}s)")
        results.append(res)
    return results


def coverage(results) -> tuple[frozenset, frozenset]:
    """(covered ops, known ops never exercised)."""
    covered = frozenset().union(*(r.ops for r in results))
    return covered, KNOWN_OPS - covered
