"""Gaussian-mixture ground truth with labelled attributes and an exact Bayes oracle.

Every full category combination owns one isotropic Gaussian. Component
means are additive over attributes (``mean = sum_a offset[a][category_a]``)
so each attribute corresponds to a consistent direction in sample space.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, VocabError


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    categories: tuple

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(self.categories) < 2:
            raise ConfigError(f"attribute {self.name}", "needs at least two categories")
        if len(set(self.categories)) != len(self.categories):
            raise ConfigError(f"attribute {self.name}", "category names must be unique")

    @property
    def K(self):
        return len(self.categories)


@dataclass(frozen=True)
class WorldSpec:
    """Declarative world description (part of the run config).

    ``groups`` maps a group name to per-attribute bias marginals,
    e.g. ``{"worker": {"gender": [0.8, 0.2]}}``; unspecified attributes are
    uniform and the joint is the product of marginals.
    """

    dim: int
    attributes: tuple
    groups: dict
    std: float = 1.0
    separation: float = 6.0
    spread: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))


class ConditionVocab:
    """Dense ids: 0 is the empty token, then groups, then category names."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[:1] != [""]:
            raise ValueError("vocabulary must start with the empty token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def id(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise VocabError(f"condition {token!r} not in vocabulary") from None

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, ConditionVocab) and self.tokens == other.tokens


@dataclass
class SyntheticWorld:
    dim: int
    attributes: tuple
    labels: np.ndarray  # (n_components, n_attributes) category indices
    means: np.ndarray  # (n_components, dim)
    std: float
    groups: dict  # group name -> joint pmf over components
    vocab: ConditionVocab = field(default=None)

    def attribute(self, name):
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i, a
        raise KeyError(f"attribute {name!r} not in world")

    def group_pmf(self, group):
        try:
            return self.groups[group]
        except KeyError:
            raise KeyError(f"unknown group {group!r}") from None

    def component_of(self, categories):
        """Component index for a full tuple of category indices."""
        hit = np.flatnonzero((self.labels == np.asarray(categories)).all(axis=1))
        return int(hit[0])

    def sample_component(self, comp, n, rng):
        return self.means[comp] + self.std * rng.standard_normal((n, self.dim))


def _joint_pmf(attributes, marginals, group):
    joint = np.ones(1)
    for a in attributes:
        m = np.asarray(marginals.get(a.name, np.full(a.K, 1.0 / a.K)), dtype=np.float64)
        key = f"world.groups.{group}.{a.name}"
        if m.shape != (a.K,):
            raise ConfigError(key, f"expected {a.K} probabilities, got {m.tolist()}")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ConfigError(key, f"not a probability vector: {m.tolist()}")
        joint = np.outer(joint, m).reshape(-1)
    unknown = set(marginals) - {a.name for a in attributes}
    if unknown:
        raise ConfigError(f"world.groups.{group}", f"unknown attributes {sorted(unknown)}")
    return joint


def make_world(spec, seed=0, max_tries=2000):
    attributes = tuple(a if isinstance(a, AttributeSpec) else AttributeSpec(a["name"], a["categories"])
                       for a in spec.attributes)
    if not attributes:
        raise ConfigError("world.attributes", "at least one attribute required")
    names = [a.name for a in attributes]
    if len(set(names)) != len(names):
        raise ConfigError("world.attributes", "attribute names must be unique")
    tokens = [""] + list(spec.groups) + [c for a in attributes for c in a.categories]
    if len(set(tokens)) != len(tokens):
        raise ConfigError("world", "group and category names must be unique and non-empty")

    labels = np.array(list(itertools.product(*[range(a.K) for a in attributes])), dtype=np.int64)
    rng = np.random.default_rng(seed)
    min_sep = spec.separation * spec.std
    for _ in range(max_tries):
        offsets = [rng.uniform(-spec.spread, spec.spread, (a.K, spec.dim)) for a in attributes]
        means = sum(offsets[j][labels[:, j]] for j in range(len(attributes)))
        means = means - means.mean(axis=0)
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        if d.min() >= min_sep:
            break
    else:
        raise ConfigError(
            "world.separation",
            f"could not place {len(labels)} components {min_sep} apart in {spec.dim} dims "
            f"within spread {spec.spread}",
        )
    groups = {g: _joint_pmf(attributes, m, g) for g, m in spec.groups.items()}
    return SyntheticWorld(spec.dim, attributes, labels, means, float(spec.std), groups, ConditionVocab(tokens))


@dataclass
class LabeledDataset:
    samples: np.ndarray  # (N, D)
    labels: np.ndarray  # (N, n_attributes)
    components: np.ndarray  # (N,)
    cond: np.ndarray  # (N,) condition id used at training time

    def __len__(self):
        return len(self.samples)


def sample_dataset(world, group, n, rng):
    """Draw ``n`` labelled samples from ``group``'s biased mixture."""
    pmf = world.group_pmf(group)
    rng = np.random.default_rng(rng)
    comps = rng.choice(len(pmf), size=n, p=pmf) if n else np.zeros(0, dtype=np.int64)
    x = world.means[comps] + world.std * rng.standard_normal((n, world.dim))
    cond = np.full(n, world.vocab.id(group), dtype=np.int64)
    return LabeledDataset(x, world.labels[comps], comps, cond)


def component_log_likelihood(world, x, prior=None):
    x = np.atleast_2d(x)
    sq = ((x[:, None, :] - world.means[None]) ** 2).sum(axis=-1)
    logp = -0.5 * sq / world.std ** 2
    if prior is not None:
        with np.errstate(divide="ignore"):
            logp = logp + np.log(prior)
    return logp


def component_posterior(world, x, prior=None):
    logp = component_log_likelihood(world, x, prior)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def bayes_posterior(world, x, attribute, prior=None):
    """Exact ``P(category | x)`` marginalised over the other attributes.

    Components are equally likely a priori unless ``prior`` (a pmf over
    components) is given, so the oracle carries none of a group's bias.
    Returns ``(K,)`` for one sample, ``(N, K)`` for a batch.
    """
    j, attr = world.attribute(attribute)
    single = np.ndim(x) == 1
    logp = component_log_likelihood(world, x, prior)
    per_cat = np.stack(
        [logsumexp(logp[:, world.labels[:, j] == k], axis=1) for k in range(attr.K)], axis=1
    )
    post = np.exp(per_cat - logsumexp(per_cat, axis=1, keepdims=True))
    return post[0] if single else post


def classify(world, x, attribute):
    return bayes_posterior(world, np.atleast_2d(x), attribute).argmax(axis=1)


def classify_component(world, x):
    return component_log_likelihood(world, x).argmax(axis=1)
