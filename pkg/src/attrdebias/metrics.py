"""Fairness discrepancy and oracle-based fidelity metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import bayes_posterior, classify_component

MIN_PER_CATEGORY = 30


@dataclass
class FDReport:
    attribute: str
    target: tuple
    mean_posterior: tuple
    fd: float
    n: int
    ci: tuple

    def to_dict(self):
        return {
            "attribute": self.attribute,
            "target": list(self.target),
            "mean_posterior": list(self.mean_posterior),
            "fd": self.fd,
            "n": self.n,
            "ci95": list(self.ci),
        }


def fd_from_posteriors(posteriors, target):
    return float(np.linalg.norm(np.asarray(target) - posteriors.mean(axis=0)))


def bootstrap_ci(posteriors, target, resamples=1000, seed=0, level=0.95):
    """Percentile interval of the FD under resampling of samples."""
    rng = np.random.default_rng(seed)
    n = len(posteriors)
    idx = rng.integers(0, n, (resamples, n))
    means = posteriors[idx].mean(axis=1)
    fds = np.linalg.norm(np.asarray(target)[None] - means, axis=1)
    a = (1 - level) / 2
    return float(np.quantile(fds, a)), float(np.quantile(fds, 1 - a))


def fd_score(samples, attribute, target, world, resamples=1000, seed=0):
    """``|| target - mean_x posterior(x) ||_2`` with a bootstrap 95% interval."""
    samples = np.atleast_2d(samples)
    if len(samples) < 1:
        raise ValueError("fd_score needs at least one sample")
    post = bayes_posterior(world, samples, attribute)
    target = tuple(float(v) for v in getattr(target, "pmf", target))
    if len(target) != post.shape[1]:
        raise ValueError(f"target has {len(target)} entries, attribute {attribute!r} has {post.shape[1]}")
    return FDReport(
        attribute, target, tuple(post.mean(axis=0).tolist()), fd_from_posteriors(post, target),
        len(samples), bootstrap_ci(post, target, resamples, seed),
    )


def _mean_pairwise(a, b, chunk=2048):
    total = 0.0
    for i in range(0, len(a), chunk):
        d = np.sqrt(((a[i:i + chunk, None, :] - b[None]) ** 2).sum(axis=-1))
        total += d.sum()
    return total / (len(a) * len(b))


def energy_distance(x, y):
    """V-statistic ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (lower is closer)."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    return float(2 * _mean_pairwise(x, y) - _mean_pairwise(x, x) - _mean_pairwise(y, y))


def mmd_rbf(x, y, bandwidth=1.0):
    """Biased squared MMD with a Gaussian kernel."""
    def k(a, b):
        return np.exp(-((a[:, None] - b[None]) ** 2).sum(-1) / (2 * bandwidth ** 2)).mean()
    return float(k(x, x) + k(y, y) - 2 * k(x, y))


@dataclass
class FidelityReport:
    per_category: dict  # component label -> energy distance (None when undersampled)
    counts: dict
    flagged: list = field(default_factory=list)

    @property
    def mean(self):
        """Mean over scored categories; ``None`` when every category was undersampled."""
        vals = [v for v in self.per_category.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self):
        return {
            "metric": "energy_distance (lower is better)",
            "per_category": self.per_category,
            "counts": self.counts,
            "undersampled": self.flagged,
            "mean": self.mean,
        }


def component_label(world, comp):
    return "/".join(a.categories[k] for a, k in zip(world.attributes, world.labels[comp]))


def split_by_component(world, samples):
    samples = np.atleast_2d(samples)
    comp = classify_component(world, samples)
    return {c: samples[comp == c] for c in range(len(world.means)) if np.any(comp == c)}


def fidelity_score(samples_by_category, world, n_ref=10000, seed=0):
    """Energy distance of each component's samples to fresh ground-truth draws."""
    per, counts, flagged = {}, {}, []
    for comp in sorted(samples_by_category):
        xs = samples_by_category[comp]
        label = component_label(world, comp)
        counts[label] = len(xs)
        if len(xs) < MIN_PER_CATEGORY:
            per[label] = None
            flagged.append(label)
            continue
        ref = world.sample_component(comp, n_ref, np.random.default_rng([seed, comp]))
        per[label] = energy_distance(xs, ref)
    return FidelityReport(per, counts, flagged)
