"""Finite-difference checks of the hand-written backward pass on a tiny model."""
from __future__ import annotations

import numpy as np

from .adapters import AdapterBank, AttributeAdapter, AdapterPair, adapter_orthogonality
from .nn import DenoiserModel, ModelSpec, Rank1, backward, grad_check
from .world import ConditionVocab

SMALL = dict(dim=4, vocab_size=5, max_timesteps=10, hidden_tokens=2, token_dim=4, cond_tokens=2,
             cond_dim=4, attn_dim=4, heads=2, time_dim=4)


def small_model(seed=0, **overrides):
    """Two cross-attention blocks, D = 4; small enough for per-entry differences."""
    spec = ModelSpec(**{**SMALL, **overrides})
    vocab = ConditionVocab([""] + [f"c{i}" for i in range(1, spec.vocab_size)])
    return DenoiserModel.init(spec, seed=seed, vocab=vocab)


def _batch(model, rng, n=3):
    d = model.spec.dim
    return (rng.standard_normal((n, d)), rng.integers(0, model.spec.max_timesteps, n),
            rng.integers(0, model.spec.vocab_size, n), rng.standard_normal((n, d)))


def check_pretrain(model, rng, tolerance=1e-4):
    """Gradients of ``0.5 * ||f(x) - y||^2`` w.r.t. every model parameter."""
    x, t, c, y = _batch(model, rng)
    params = {k: v.copy() for k, v in model.params.items()}
    probe = DenoiserModel(model.spec, params, model.vocab)

    def loss_and_grad():
        out, tape = probe.forward(x, t, c, tape_mode="pretrain")
        d = out - y
        return 0.5 * float((d ** 2).sum()), backward(tape, d)

    return grad_check(params, loss_and_grad, tolerance)


def check_adapters(model, rng, tolerance=1e-4, placement="all", scale=0.3):
    """Gradients w.r.t. rank-1 ``p``/``q`` on every adaptable matrix."""
    x, t, c, y = _batch(model, rng)
    names = model.adapter_targets(placement)
    vecs = {}
    for n in names:
        m, k = model.weight_shape(n)
        vecs[n + ".p"] = rng.standard_normal(m)
        vecs[n + ".q"] = rng.standard_normal(k)

    def loss_and_grad():
        ad = [Rank1(n, vecs[n + ".p"], vecs[n + ".q"], scale, key=n) for n in names]
        out, tape = model.forward(x, t, c, adapters=ad, tape_mode="adapter")
        d = out - y
        return 0.5 * float((d ** 2).sum()), backward(tape, d)

    return grad_check(vecs, loss_and_grad, tolerance)


def check_orthogonality(model, rng, tolerance=1e-4):
    """Gradients of the cross-bank orthogonality penalty."""
    names = model.adapter_targets()

    def rand_adapter(cat):
        return AttributeAdapter(cat, [AdapterPair(n, rng.standard_normal(model.weight_shape(n)[0]),
                                                  rng.standard_normal(model.weight_shape(n)[1])) for n in names])

    prior = [AdapterBank("a", ["x", "y"], [rand_adapter("x"), rand_adapter("y")])]
    cur = rand_adapter("z")
    vecs = {}
    for pair in cur.pairs:
        vecs[pair.target + ".p"] = pair.p
        vecs[pair.target + ".q"] = pair.q
    return grad_check(vecs, lambda: adapter_orthogonality(prior, cur), tolerance)


def run_grad_checks(mode="both", tolerance=1e-4, seed=0):
    rng = np.random.default_rng(seed)
    model = small_model(seed)
    reports = {}
    if mode in ("adapter", "both"):
        reports["adapter"] = check_adapters(model, rng, tolerance)
        reports["orthogonality"] = check_orthogonality(model, rng, tolerance)
    if mode in ("pretrain", "both"):
        reports["pretrain"] = check_pretrain(model, rng, tolerance)
    return reports
