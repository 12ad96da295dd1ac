"""Prescribed-distribution generation through one-hot adapter selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import PatchedModelView, check_indicator, patch_weights, select
from .diffusion import sample_from_noise
from .errors import IndicatorError


@dataclass(frozen=True)
class DistributionSpec:
    attribute: str
    pmf: tuple

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=np.float64)
        if pmf.ndim != 1 or len(pmf) < 2 or np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-9:
            raise IndicatorError(f"invalid pmf for {self.attribute!r}: {list(self.pmf)}")
        object.__setattr__(self, "pmf", tuple(float(v) for v in pmf))

    @property
    def K(self):
        return len(self.pmf)


@dataclass(frozen=True)
class IndicatorVector:
    h: np.ndarray
    k: int

    def __post_init__(self):
        if check_indicator(self.h, len(self.h)) != self.k:
            raise IndicatorError("indicator index does not match the hot entry")


def uniform_pmf(K, attribute=""):
    if K < 2:
        raise IndicatorError(f"need at least two categories, got K={K}")
    return DistributionSpec(attribute, tuple(np.full(K, 1.0 / K)))


def sample_indicator(spec, rng):
    k = int(rng.choice(spec.K, p=spec.pmf))
    h = np.zeros(spec.K)
    h[k] = 1.0
    return IndicatorVector(h, k)


def compose_views(model, selections, alpha_scale):
    """Additive view over every ``(bank, indicator)`` pair; order-independent."""
    seen = set()
    view = model
    for bank, ind in selections:
        if bank.attribute in seen:
            raise ValueError(f"attribute {bank.attribute!r} selected twice")
        seen.add(bank.attribute)
        view = patch_weights(view, select(bank, ind.h), alpha_scale, label=bank.attribute)
    return view if isinstance(view, PatchedModelView) else PatchedModelView(model)


@dataclass
class GenerationRecord:
    index: int
    seed: int
    group: str
    chosen: dict  # attribute -> category name
    z0: np.ndarray

    def to_json(self):
        return {
            "index": self.index,
            "seed": self.seed,
            "group": self.group,
            "chosen": self.chosen,
            "z0": [float(v) for v in self.z0],
        }


def record_seeds(seed, n):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def generate_batch(model, sched, group, specs, banks, n, guidance_scale, alpha_scale, seed):
    """Generate ``n`` samples, each under adapters picked by fresh indicators.

    Record ``i`` draws its indicators and all sampler noise from its own
    child seed, so any record can be regenerated alone. Records sharing an
    indicator combination are sampled together.
    """
    if len(specs) != len(banks):
        raise ValueError("specs and banks must be aligned by attribute")
    for spec, bank in zip(specs, banks):
        if spec.attribute != bank.attribute or spec.K != bank.K:
            raise ValueError(f"spec for {spec.attribute!r} does not match bank {bank.attribute!r}")
    if n == 0:
        return []
    cond = model.vocab.id(group)
    seeds = record_seeds(seed, n)
    picks, noise = [], np.empty((sched.T_steps + 1, n, model.spec.dim))
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        picks.append(tuple(sample_indicator(spec, rng) for spec in specs))
        noise[:, i] = rng.standard_normal((sched.T_steps + 1, model.spec.dim))

    z0 = np.empty((n, model.spec.dim))
    combos = {}
    for i, inds in enumerate(picks):
        combos.setdefault(tuple(ind.k for ind in inds), []).append(i)
    for key in sorted(combos):
        idx = np.asarray(combos[key])
        view = compose_views(model, list(zip(banks, picks[idx[0]])), alpha_scale)
        traj = sample_from_noise(view, cond, sched, guidance_scale, noise[:, idx], keep=False)
        z0[idx] = traj.z0
    return [
        GenerationRecord(i, seeds[i], group,
                         {b.attribute: b.categories[ind.k] for b, ind in zip(banks, picks[i])}, z0[i])
        for i in range(n)
    ]
