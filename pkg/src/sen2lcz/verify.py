"""Finite-difference verification suite for every differentiable layer kind and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .model import ModelConfig, build, double_pool, fused_loss
from .tensor import Tensor, elementwise, finite_difference_check, matmul, no_grad

LAYER_TOL = 1e-6
MODEL_TOL = 1e-4
EPS = 1e-5
MAX_SKIP_FRACTION = 0.25  # model checks: at most this share of stencils may straddle a kink
F64 = np.float64


@dataclass
class CheckResult:
    kind: str
    max_rel_err: float
    tol: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        if self.skipped > MAX_SKIP_FRACTION * (self.checked + self.skipped):
            return False
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        skip = f" skipped={self.skipped}/{self.checked + self.skipped}" if self.skipped else ""
        return f"{self.kind:<18} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}{skip} {status}"


def _away_from_zero(rng, shape, gap=0.1):
    z = rng.normal(size=shape)
    return np.sign(z) * (gap + np.abs(z))


def _proj(out: Tensor, r: np.ndarray) -> Tensor:
    """Random linear functional of ``out`` so no gradient vanishes by symmetry."""
    return (out * Tensor(r)).sum()


def _check_elementwise(rng):
    x = Tensor(_away_from_zero(rng, (3, 4)))
    y = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))
    r = rng.normal(size=(3, 4))

    def fn(t):
        a = elementwise("add", t, y)
        s = elementwise("sub", a, elementwise("scale", t, 0.5))
        m = elementwise("mul", s, t)
        return _proj(elementwise("relu", m), r)

    return finite_difference_check(fn, x, EPS, extra=[y])


def _check_matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    r = rng.normal(size=(3, 2))
    return finite_difference_check(lambda t: _proj(matmul(t, b), r), a, EPS, extra=[b])


def _check_conv2d(rng):
    layer = L.Conv2dLayer.create(3, 4, rng, F64)
    layer.bias.data[:] = rng.normal(size=4)
    x = Tensor(rng.normal(size=(2, 3, 5, 6)))
    r = rng.normal(size=(2, 4, 5, 6))
    return finite_difference_check(lambda t: _proj(L.conv2d(layer, t), r), x, EPS,
                                   extra=[layer.weight, layer.bias])


def _bn_layer(rng, ch):
    bn = L.BatchNormLayer.create(ch, F64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, size=ch)
    bn.beta.data[:] = rng.normal(size=ch)
    bn.running_mean[:] = rng.normal(size=ch)
    bn.running_var[:] = rng.uniform(0.5, 2.0, size=ch)
    return bn


def _check_bn_train(rng):
    bn = _bn_layer(rng, 3)
    x = Tensor(rng.normal(size=(4, 3, 3, 3)) * 2 + 1)
    r = rng.normal(size=(4, 3, 3, 3))
    saved = bn.running_mean.copy(), bn.running_var.copy()

    def fn(t):
        # running stats must not leak between evaluations
        bn.running_mean[:], bn.running_var[:] = saved
        return _proj(L.batchnorm(bn, t, "train"), r)

    return finite_difference_check(fn, x, EPS, extra=[bn.gamma, bn.beta])


def _check_bn_infer(rng):
    bn = _bn_layer(rng, 3)
    x = Tensor(rng.normal(size=(2, 3, 3, 3)))
    r = rng.normal(size=(2, 3, 3, 3))
    return finite_difference_check(lambda t: _proj(L.batchnorm(bn, t, "infer"), r), x, EPS,
                                   extra=[bn.gamma, bn.beta])


def _distinct(rng, shape):
    # well-separated values so no window maximum is within eps of a tie
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(F64) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _check_maxpool(rng):
    x = Tensor(_distinct(rng, (2, 2, 4, 4)))
    r = rng.normal(size=(2, 2, 2, 2))
    return finite_difference_check(lambda t: _proj(L.pool2x2(t, "max"), r), x, EPS)


def _check_avgpool(rng):
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    r = rng.normal(size=(2, 2, 2, 2))
    return finite_difference_check(lambda t: _proj(L.pool2x2(t, "avg"), r), x, EPS)


def _check_double_pool(rng):
    x = Tensor(_distinct(rng, (2, 2, 4, 4)))
    r = rng.normal(size=(2, 4, 2, 2))
    return finite_difference_check(lambda t: _proj(double_pool(t), r), x, EPS)


def _check_gap(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    r = rng.normal(size=(2, 3))
    return finite_difference_check(lambda t: _proj(L.global_avg_pool(t), r), x, EPS)


def _check_dense(rng):
    layer = L.DenseLayer.create(5, 3, rng, F64)
    layer.bias.data[:] = rng.normal(size=3)
    x = Tensor(rng.normal(size=(4, 5)))
    r = rng.normal(size=(4, 3))
    return finite_difference_check(lambda t: _proj(L.dense(layer, t), r), x, EPS,
                                   extra=[layer.weight, layer.bias])


def _check_dropout(rng):
    x = Tensor(rng.normal(size=(4, 6)))
    r = rng.normal(size=(4, 6))
    # a fresh generator with a fixed seed per call keeps the mask fixed
    return finite_difference_check(
        lambda t: _proj(L.dropout(t, 0.3, "train", np.random.default_rng(7)), r), x, EPS)


def _check_softmax(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    r = rng.normal(size=(3, 5))
    return finite_difference_check(lambda t: _proj(L.softmax(t), r), x, EPS)


def _labels(rng, b, k=17):
    return L.one_hot(rng.integers(1, k + 1, size=b), k, F64)


def _check_ce_logits(rng):
    x = Tensor(rng.normal(size=(4, 17)))
    y = _labels(rng, 4)
    w = rng.uniform(0.5, 2.0, size=4)
    return finite_difference_check(lambda t: L.softmax_cross_entropy(t, y, "logits", w), x, EPS)


def _check_ce_probs(rng):
    x = Tensor(rng.normal(size=(4, 17)))
    y = _labels(rng, 4)
    return finite_difference_check(
        lambda t: L.softmax_cross_entropy(L.softmax(t), y, "probabilities"), x, EPS)


def _check_fused_loss(rng):
    logits = [Tensor(rng.normal(size=(3, 17))) for _ in range(4)]
    y = _labels(rng, 3)

    def fn(t):
        heads = [L.softmax(t)] + [L.softmax(z) for z in logits[1:]]
        return fused_loss(heads, y, "mean-prob")

    return finite_difference_check(fn, logits[0], EPS, extra=logits[1:])


def _small_model(rng, fusion=True):
    model = build(ModelConfig(f=4, N=1, fusion=fusion), rng, dtype=F64)
    x = rng.normal(size=(2, 10, 32, 32))
    # running statistics = exact batch statistics of a similar batch, so infer mode is well scaled
    norms = [bn for block in model.blocks for bn in block.norms]
    for bn in norms:
        bn.momentum = 0.0
    with no_grad():
        model.forward(Tensor(rng.normal(size=(4, 10, 32, 32))), "train", np.random.default_rng(0))
    for bn in norms:
        bn.momentum = 0.99
    for p in model.parameters():
        if p.ndim == 1:
            p.data[:] += rng.normal(scale=0.1, size=p.shape)
    return model, Tensor(x), _labels(rng, 2)


def _check_model_infer(rng, max_coords=40, info=None):
    model, x, y = _small_model(rng)
    fn = lambda t: fused_loss(model.forward(t, "infer").heads, y)
    return finite_difference_check(fn, x, EPS, extra=model.parameters(), max_coords=max_coords, seed=1,
                                   skip_kinks=True, info=info)


def _check_model_train(rng, max_coords=40, info=None):
    model, x, y = _small_model(rng)
    buffers = model.named_buffers()
    saved = [a.copy() for _, a in buffers]

    def fn(t):
        for (_, a), s in zip(buffers, saved):  # keep running stats fixed across evaluations
            a[...] = s
        return fused_loss(model.forward(t, "train", np.random.default_rng(3)).heads, y)

    # conv biases directly followed by train-mode batch norm have an identically zero
    # gradient (the batch mean absorbs them), so relative error is undefined there
    params = [p for n, p in model.named_parameters() if not (".conv" in n and n.endswith(".bias"))]
    return finite_difference_check(fn, x, EPS, extra=params, max_coords=max_coords, seed=2,
                                   skip_kinks=True, info=info)


LAYER_CHECKS: dict[str, Callable] = {
    "elementwise": _check_elementwise,
    "matmul": _check_matmul,
    "conv2d": _check_conv2d,
    "batchnorm_train": _check_bn_train,
    "batchnorm_infer": _check_bn_infer,
    "maxpool": _check_maxpool,
    "avgpool": _check_avgpool,
    "double_pool": _check_double_pool,
    "global_avg_pool": _check_gap,
    "dense": _check_dense,
    "dropout": _check_dropout,
    "softmax": _check_softmax,
    "ce_logits": _check_ce_logits,
    "ce_probabilities": _check_ce_probs,
    "fused_loss": _check_fused_loss,
}

MODEL_CHECKS: dict[str, Callable] = {
    "model_f4n1_infer": _check_model_infer,
    "model_f4n1_train": _check_model_train,
}


def run_gradcheck_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    results = []
    for i, (kind, check) in enumerate(LAYER_CHECKS.items()):
        results.append(CheckResult(kind, check(np.random.default_rng([seed, i])), LAYER_TOL))
    if include_model:
        for i, (kind, check) in enumerate(MODEL_CHECKS.items()):
            info: dict = {}
            err = check(np.random.default_rng([seed, 100 + i]), info=info)
            results.append(CheckResult(kind, err, MODEL_TOL, info["checked"], info["skipped"]))
    return results
