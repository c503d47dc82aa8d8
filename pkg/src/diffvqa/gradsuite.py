"""Finite-difference checks over every differentiable operation.

Inputs are random but kept away from kinks (relu at 0, ties in maximum,
integer sample positions in bilinear sampling) so central differences are
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .registration import AffineParams, RegLossWeights, reg_loss
from .tensor import Tensor, grad_check

OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def _away(rng, shape, gap=0.1, scale=2.0):
    x = rng.uniform(gap, scale, shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _probe(rng, shape) -> Tensor:
    return Tensor(rng.uniform(-1, 1, shape))


def _checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float], float]]:
    # fixed random cotangents so every output element contributes to the check
    P = {"mm": _probe(rng, (3, 5)), "conv": _probe(rng, (2, 3, 4, 4)), "gs": _probe(rng, (1, 2, 4, 4)),
         "ew": _probe(rng, (3, 4)), "ln": _probe(rng, (3, 6))}
    out = []

    def add(name, f, x, tol=OP_TOL):
        out.append((name, lambda: grad_check(f, x), tol))

    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 5))
    add("matmul/a", lambda t: T.tsum(T.matmul(t, Tensor(b)) * P["mm"]), a)
    add("matmul/b", lambda t: T.tsum(T.matmul(Tensor(a), t) * P["mm"]), b)

    x = rng.uniform(-1, 1, (2, 2, 7, 7))
    w = rng.normal(0, 0.5, (3, 2, 3, 3))
    cb = rng.normal(0, 0.1, 3)
    add("conv2d/x", lambda t: T.tsum(T.conv2d(t, Tensor(w), Tensor(cb), 2, 1) * P["conv"]), x)
    add("conv2d/w", lambda t: T.tsum(T.conv2d(Tensor(x), t, Tensor(cb), 2, 1) * P["conv"]), w)
    add("conv2d/b", lambda t: T.tsum(T.conv2d(Tensor(x), Tensor(w), t, 2, 1) * P["conv"]), cb)

    img = rng.uniform(0, 1, (1, 2, 5, 5))
    # source positions at cell centres +- 0.2 px: never on a cell boundary
    cells = rng.integers(0, 4, (1, 4, 4, 2)) + 0.5 + rng.uniform(-0.2, 0.2, (1, 4, 4, 2))
    grid = cells / 4.0 * 2.0 - 1.0
    add("grid_sample/x", lambda t: T.tsum(T.grid_sample_bilinear(t, Tensor(grid)) * P["gs"]), img)
    add("grid_sample/grid", lambda t: T.tsum(T.grid_sample_bilinear(Tensor(img), t) * P["gs"]), grid)

    e = _away(rng, (3, 4))
    pos = rng.uniform(0.2, 2.0, (3, 4))
    other = e + _away(rng, (3, 4), gap=0.2, scale=1.0)
    add("add", lambda t: T.tsum(T.add(t, Tensor(other)) * P["ew"]), e)
    add("sub", lambda t: T.tsum(T.sub(Tensor(other), t) * P["ew"]), e)
    add("mul", lambda t: T.tsum(T.mul(t, Tensor(other)) * P["ew"]), e)
    add("relu", lambda t: T.tsum(T.relu(t) * P["ew"]), e)
    add("exp", lambda t: T.tsum(T.exp(t) * P["ew"]), e)
    add("log", lambda t: T.tsum(T.log(t) * P["ew"]), pos)
    add("maximum/a", lambda t: T.tsum(T.maximum(t, Tensor(other)) * P["ew"]), e)
    add("maximum/b", lambda t: T.tsum(T.maximum(Tensor(other), t) * P["ew"]), e)

    ln_x = rng.normal(size=(3, 6))
    g, beta = rng.uniform(0.5, 1.5, 6), rng.normal(size=6)
    add("layer_norm/x", lambda t: T.tsum(T.layer_norm(t, Tensor(g), Tensor(beta)) * P["ln"]), ln_x)
    add("layer_norm/gamma", lambda t: T.tsum(T.layer_norm(Tensor(ln_x), t, Tensor(beta)) * P["ln"]), g)
    add("softmax", lambda t: T.tsum(T.softmax(t, axis=-1) * P["ln"]), ln_x)

    logits = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, 5)
    mask = np.array([False, True, False, False, True])
    add("cross_entropy", lambda t: T.cross_entropy(t, targets, mask), logits)

    theta = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])[None] + rng.uniform(-0.3, 0.3, (2, 2, 3))
    wts = RegLossWeights(1.0, 0.5, 0.25)
    add("reg_loss", lambda t: reg_loss(AffineParams(t), wts), theta)
    return out


def _model_check(rng: np.random.Generator) -> float:
    from .model import DiffVQAModel, ModelConfig, synthetic_vocabulary

    vocab = synthetic_vocabulary()
    cfg = ModelConfig.toy(len(vocab), image_size=16, enc_channels=(2, 3, 3, 4), d_model=8,
                          proj_heads=2, text_heads=2, dec_heads=2, dec_layers=1, mlp_ratio=2,
                          reg_channels=(2,))
    model = DiffVQAModel(cfg, seed=int(rng.integers(1 << 31)))
    main = Tensor(rng.uniform(size=(2, 1, 16, 16)))
    ref = Tensor(rng.uniform(size=(2, 1, 16, 16)))
    qs = [vocab.encode("what has changed?"), vocab.encode("how has the nodule changed?")]
    ans = [vocab.encode("no change is observed"),
           vocab.encode("the nodule in the left upper zone has shrunk")]

    def f(w):
        model.projector.inp.weight = w
        return model.lm_loss(main, ref, qs, ans)

    return grad_check(f, model.projector.inp.weight.data.copy())


def run_gradient_suite(seed: int = 0) -> list[GradResult]:
    """Relative error of every check; each row carries its own tolerance."""
    rng = np.random.default_rng(seed)
    results = [GradResult(name, fn(), tol) for name, fn, tol in _checks(rng)]
    results.append(GradResult("model/L_LM wrt projector weight", _model_check(rng), MODEL_TOL))
    return results
