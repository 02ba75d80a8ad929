"""Shared test fixtures that build small models and run gradient checks."""

from __future__ import annotations

import numpy as np

from holovae import autodiff as ad
from holovae.model import ModelConfig, _batch_loss, init_parameters
from holovae.so3 import default_cg_cache
from holovae.steerable import Signature, SteerableTensor, split_blocks

from oracles import central_difference


def tiny_config(**kw) -> ModelConfig:
    base = dict(input_signature=str(Signature.uniform(2, 2)), degrees=[2, 1], channels=[2, 2], z=2)
    base.update(kw)
    return ModelConfig(**base)


def model_gradient_errors(cfg: ModelConfig, n: int = 4, seed: int = 0, eps: float = 1e-5):
    """Relative error between taped and central-difference gradients, per parameter."""
    rng = np.random.default_rng(seed)
    params, buffers = init_parameters(cfg, seed)
    x = SteerableTensor.random(cfg.signature, rng, (n,))
    blocks = split_blocks(x.data, cfg.signature)
    cache = default_cg_cache(max(cfg.L, 2))
    size = cfg.signature.size

    def loss(p):
        val, _, _, _ = _batch_loss(cfg, p, buffers, blocks, size, cfg.beta, None, "train", cache, sample=False)
        return float(ad.value_of(val))

    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    total, _, _, _ = _batch_loss(cfg, leaves, buffers, blocks, size, cfg.beta, None, "train", cache, sample=False)
    grads = tape.backward(total)
    errors = {}
    for name, value in params.items():
        fd = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            plus = dict(params)
            minus = dict(params)
            plus[name] = value.copy()
            minus[name] = value.copy()
            plus[name][i] += eps
            minus[name][i] -= eps
            fd[i] = (loss(plus) - loss(minus)) / (2 * eps)
        g = grads[leaves[name]]
        errors[name] = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
    return errors


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


# name -> (input generator, function applied to Vars)
CASES = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
    "sub": (lambda r: [r.normal(size=(3, 1)), r.normal(size=(3, 4))], lambda a, b: a - b),
    "mul": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: a * b),
    "div": (lambda r: [r.normal(size=(5,)), _positive(r, (5,))], lambda a, b: a / b),
    "neg": (lambda r: [r.normal(size=(4,))], lambda a: -a),
    "power": (lambda r: [_positive(r, (4,))], lambda a: a**2.5),
    "sqrt": (lambda r: [_positive(r, (6,))], ad.sqrt),
    "exp": (lambda r: [r.normal(size=(3, 2))], ad.exp),
    "log": (lambda r: [_positive(r, (3, 2))], ad.log),
    "sum": (lambda r: [r.normal(size=(3, 4, 2))], lambda a: ad.sum_(a, axis=(0, 2), keepdims=True)),
    "reshape": (lambda r: [r.normal(size=(3, 4))], lambda a: ad.reshape(a, (2, 6))),
    "getitem": (lambda r: [r.normal(size=(5, 3))], lambda a: a[[0, 2, 2, 4], 1:]),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))], lambda a, b: ad.concatenate([a, b], axis=1)),
    "einsum": (lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 5)), r.normal(size=(3, 5, 7))],
               lambda a, b, c: ad.einsum("bci,bcj,ijk->bck", a, b, c)),
    "einsum_inner": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda a, b: ad.einsum("ij,jk->i", a, b)),
    "logsumexp": (lambda r: [r.normal(size=(4, 5))], lambda a: ad.logsumexp(a, axis=-1)),
    "cross": (lambda r: [r.normal(size=(4, 3)), r.normal(size=(4, 3))], ad.cross),
}


def primitive_gradient_error(name: str, trials: int = 20) -> float:
    """Worst relative error of a primitive's vector-Jacobian product over random trials."""
    make, fn = CASES[name]
    rng = np.random.default_rng(sorted(CASES).index(name))
    worst = 0.0
    for _ in range(trials):
        inputs = make(rng)
        u = rng.normal(size=np.shape(fn(*inputs)))
        tape = ad.Tape()
        leaves = [tape.leaf(v) for v in inputs]
        grads = tape.backward(ad.sum_(fn(*leaves) * u))
        for k, v in enumerate(inputs):

            def f(z, k=k):
                args = list(inputs)
                args[k] = z
                return float(np.sum(np.asarray(fn(*args)) * u))

            fd = central_difference(f, v)
            worst = max(worst, np.linalg.norm(grads[leaves[k]] - fd) / max(np.linalg.norm(fd), 1e-12))
    return worst
