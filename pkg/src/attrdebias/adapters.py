"""Rank-1 attribute adapters, indicator selection, weight-patch views and
the cross-bank orthogonality penalty."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AdapterShapeError,
    IncompleteAdapterError,
    IncongruentBanksError,
    IndicatorError,
    RevokedViewError,
)
from .nn import Rank1


@dataclass
class AdapterPair:
    target: str
    p: np.ndarray
    q: np.ndarray


@dataclass
class AttributeAdapter:
    """All rank-1 pairs for one category; one pair per adapted matrix."""

    category: str
    pairs: list

    @property
    def targets(self):
        return [pair.target for pair in self.pairs]

    def stacked(self):
        return stack(self)

    def copy(self):
        return AttributeAdapter(self.category, [AdapterPair(a.target, a.p.copy(), a.q.copy()) for a in self.pairs])

    def terms(self, scale, attribute=None, trainable=False):
        return [
            Rank1(pair.target, pair.p, pair.q, scale, key=pair.target if trainable else None)
            for pair in self.pairs
        ]


@dataclass
class AdapterBank:
    attribute: str
    categories: tuple
    adapters: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if [a.category for a in self.adapters] != list(self.categories):
            raise IncongruentBanksError("adapter order must match the attribute's category order")
        targets = [a.targets for a in self.adapters]
        if any(t != targets[0] for t in targets):
            raise IncongruentBanksError("adapters in one bank must cover the same matrices")

    @property
    def K(self):
        return len(self.adapters)

    @property
    def targets(self):
        return self.adapters[0].targets

    def shapes(self):
        return [(len(p.p), len(p.q)) for p in self.adapters[0].pairs]


def init_adapter(model, category, targets, rng, q_std=0.2):
    """Zero ``p`` (exact no-op) and small random ``q``."""
    pairs = []
    for target in targets:
        m, n = model.weight_shape(target)
        pairs.append(AdapterPair(target, np.zeros(m), q_std * rng.standard_normal(n)))
    return AttributeAdapter(category, pairs)


def stack(adapter):
    """Column-stack the ``p`` and ``q`` vectors, zero-padding to the longest."""
    if not adapter.pairs or any(p.p is None or p.q is None for p in adapter.pairs):
        raise IncompleteAdapterError(f"adapter for {adapter.category!r} is missing pairs")
    m = max(len(p.p) for p in adapter.pairs)
    n = max(len(p.q) for p in adapter.pairs)
    P = np.zeros((m, len(adapter.pairs)))
    Q = np.zeros((n, len(adapter.pairs)))
    for j, pair in enumerate(adapter.pairs):
        P[: len(pair.p), j] = pair.p
        Q[: len(pair.q), j] = pair.q
    return P, Q


def unstack(P, Q, targets, shapes, category=""):
    if P.shape[1] != len(targets) or Q.shape[1] != len(targets):
        raise IncompleteAdapterError("stacked matrices do not match the target count")
    return AttributeAdapter(
        category,
        [AdapterPair(t, P[:m, j].copy(), Q[:n, j].copy()) for j, (t, (m, n)) in enumerate(zip(targets, shapes))],
    )


def check_indicator(h, K):
    h = np.asarray(h)
    if h.shape != (K,) or not np.all((h == 0) | (h == 1)) or h.sum() != 1:
        raise IndicatorError(f"indicator must be one-hot of length {K}, got {h.tolist()}")
    return int(np.argmax(h))


def select(bank, h):
    """The adapter whose indicator entry is 1 (pure selection)."""
    return bank.adapters[check_indicator(h, bank.K)]


class PatchedModelView:
    """Model whose adapted matrices act as ``W + scale * p q^T``.

    Rank-1 terms are applied at forward time and sorted by label so that
    composition is order-independent; the base model is never written.
    """

    def __init__(self, model, entries=()):
        self.model = model
        self.entries = tuple(sorted(entries, key=lambda e: e[0]))
        self.revoked = False
        self._terms = [term for _, adapter, scale in self.entries for term in adapter.terms(scale)]

    @property
    def spec(self):
        return self.model.spec

    @property
    def vocab(self):
        return self.model.vocab

    @property
    def params(self):
        return self.model.params

    def terms(self):
        if self.revoked:
            raise RevokedViewError("patched view has been revoked")
        return list(self._terms)

    def forward(self, x, t, cond, adapters=None, tape_mode=None):
        return self.model.forward(x, t, cond, adapters=self.terms() + list(adapters or ()), tape_mode=tape_mode)

    __call__ = forward

    def revoke(self):
        self.revoked = True

    def dense(self):
        """Materialised copy of the base model with every rank-1 term folded in."""
        out = self.model.copy()
        for term in self.terms():
            out.params[term.target + ".w"] += term.scale * np.outer(term.p, term.q)
        return out


def _check_targets(model, adapter):
    for pair in adapter.pairs:
        key = pair.target + ".w"
        if key not in model.params:
            raise AdapterShapeError(f"adapter target {pair.target!r} not found in model")
        if model.params[key].shape != (len(pair.p), len(pair.q)):
            raise AdapterShapeError(
                f"adapter on {pair.target!r} is {len(pair.p)}x{len(pair.q)}, "
                f"matrix is {model.params[key].shape}"
            )


def patch_weights(model, adapter, alpha_scale, label=None):
    """View of ``model`` (or of an existing view) with ``adapter`` added at ``alpha_scale``."""
    base, entries = (model.model, model.entries) if isinstance(model, PatchedModelView) else (model, ())
    _check_targets(base, adapter)
    label = label if label is not None else adapter.category
    if any(e[0] == label for e in entries):
        raise ValueError(f"view already carries an adapter labelled {label!r}")
    return PatchedModelView(base, entries + ((label, adapter, float(alpha_scale)),))


# -- orthogonality --------------------------------------------------------------

def _check_congruent(banks):
    ref = banks[0]
    for b in banks[1:]:
        if b.targets != ref.targets or b.shapes() != ref.shapes():
            raise IncongruentBanksError(
                f"banks {ref.attribute!r} and {b.attribute!r} adapt different matrices"
            )


PAIRINGS = ("positional", "all_pairs")


def _prior_columns(prior_banks, slot):
    """Wide P and Q of the prior adapters paired with category ``slot``
    (``None`` pairs with every prior adapter)."""
    chosen = [a for b in prior_banks for k, a in enumerate(b.adapters) if slot is None or k == slot]
    if not chosen:
        return None, None
    Ps, Qs = zip(*(stack(a) for a in chosen))
    return np.hstack(Ps), np.hstack(Qs)


def adapter_orthogonality(prior_banks, adapter, slot=None):
    """Penalty of one adapter against prior adapters.

    ``sum_j ||P_j^T P||_F^2 + ||Q_j^T Q||_F^2`` over the prior adapters
    ``j`` in category slot ``slot`` of each prior bank, or over all of them
    when ``slot`` is ``None``. Returns ``(loss, grads)`` with grads keyed
    ``target.p`` / ``target.q``.
    """
    Pp, Qp = _prior_columns(prior_banks, slot)
    if Pp is None:
        return 0.0, {}
    P, Q = stack(adapter)
    if Pp.shape[0] != P.shape[0] or Qp.shape[0] != Q.shape[0]:
        raise IncongruentBanksError("prior banks and adapter have different padded dimensions")
    GP, GQ = Pp.T @ P, Qp.T @ Q
    loss = float((GP ** 2).sum() + (GQ ** 2).sum())
    dP, dQ = 2.0 * Pp @ GP, 2.0 * Qp @ GQ
    grads = {}
    for j, pair in enumerate(adapter.pairs):
        grads[pair.target + ".p"] = dP[: len(pair.p), j]
        grads[pair.target + ".q"] = dQ[: len(pair.q), j]
    return loss, grads


def orthogonality_loss(banks_prior, bank_current, pairing="positional"):
    """Cross-bank penalty ``||P_prior^T P_cur||_F^2 + ||Q_prior^T Q_cur||_F^2``.

    With ``positional`` pairing the current bank's ``k``-th adapter meets
    the ``k``-th adapter of each prior bank (slots past a prior bank's K
    are unpaired); ``all_pairs`` meets every prior adapter. Returns
    ``(loss, grads)`` where ``grads[k]`` is the gradient map of adapter ``k``.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    _check_congruent(list(banks_prior) + [bank_current])
    total, grads = 0.0, []
    for k, adapter in enumerate(bank_current.adapters):
        loss, g = adapter_orthogonality(banks_prior, adapter, k if pairing == "positional" else None)
        total += loss
        grads.append(g)
    return total, grads


def random_baseline(banks_prior, bank_current, rng, draws=16, pairing="positional"):
    """Mean penalty when every current vector is replaced by a random
    direction of the same norm."""
    rng = np.random.default_rng(rng)
    vals = []
    for _ in range(draws):
        adapters = []
        for a in bank_current.adapters:
            pairs = []
            for pair in a.pairs:
                rp, rq = rng.standard_normal(len(pair.p)), rng.standard_normal(len(pair.q))
                rp *= np.linalg.norm(pair.p) / np.linalg.norm(rp)
                rq *= np.linalg.norm(pair.q) / np.linalg.norm(rq)
                pairs.append(AdapterPair(pair.target, rp, rq))
            adapters.append(AttributeAdapter(a.category, pairs))
        rand = AdapterBank(bank_current.attribute, bank_current.categories, adapters)
        vals.append(orthogonality_loss(banks_prior, rand, pairing)[0])
    return float(np.mean(vals))
