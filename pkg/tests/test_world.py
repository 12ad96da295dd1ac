import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrdebias.errors import ConfigError, VocabError
from attrdebias.world import (
    AttributeSpec, ConditionVocab, WorldSpec, bayes_posterior, classify, make_world, sample_dataset,
)


def test_vocab_layout(two_attr_world):
    v = two_attr_world.vocab
    assert v.id("") == 0
    assert v.id("worker") == 1
    assert [v.id(c) for c in ("male", "female", "a", "d")] == [2, 3, 4, 7]
    with pytest.raises(VocabError):
        v.id("nurse")


def test_vocab_requires_empty_token_first():
    with pytest.raises(Exception):
        ConditionVocab(["worker", ""])


def test_components_are_separated(two_attr_world):
    w = two_attr_world
    d = np.linalg.norm(w.means[:, None] - w.means[None], axis=-1)
    d[np.diag_indices_from(d)] = np.inf
    assert d.min() >= 6 * w.std
    assert len(w.means) == 8
    np.testing.assert_allclose(w.means.mean(axis=0), 0, atol=1e-12)


def test_world_is_seed_deterministic():
    spec = WorldSpec(2, [AttributeSpec("g", ["x", "y"])], {"w": {"g": [0.5, 0.5]}})
    np.testing.assert_array_equal(make_world(spec, 4).means, make_world(spec, 4).means)


def test_unsatisfiable_separation_is_config_error():
    spec = WorldSpec(1, [AttributeSpec("r", list("abcdefgh"))], {"w": {}}, spread=3.0)
    with pytest.raises(ConfigError, match="world.separation"):
        make_world(spec, max_tries=50)


def test_bad_marginal_names_key():
    spec = WorldSpec(2, [AttributeSpec("g", ["x", "y"])], {"w": {"g": [0.5, 0.6]}})
    with pytest.raises(ConfigError, match="world.groups.w.g"):
        make_world(spec)


def test_attribute_spec_needs_two_categories():
    with pytest.raises(Exception):
        AttributeSpec("g", ["only"])


def test_joint_pmf_is_product_of_marginals(two_attr_world):
    joint = two_attr_world.group_pmf("worker")
    np.testing.assert_allclose(joint, np.outer([0.8, 0.2], [0.7, 0.1, 0.1, 0.1]).ravel())


def test_dataset_frequencies_within_binomial_bounds(two_attr_world):
    data = sample_dataset(two_attr_world, "worker", 20000, 0)
    n = len(data)
    for j, marg in enumerate(([0.8, 0.2], [0.7, 0.1, 0.1, 0.1])):
        freq = np.bincount(data.labels[:, j], minlength=len(marg)) / n
        sd = np.sqrt(np.asarray(marg) * (1 - np.asarray(marg)) / n)
        assert np.all(np.abs(freq - marg) <= 3 * sd)


def test_posterior_at_mean_is_confident(two_attr_world):
    w = two_attr_world
    for comp, labels in enumerate(w.labels):
        post = bayes_posterior(w, w.means[comp], "race")
        assert post[labels[1]] >= 0.99


def test_posterior_midpoint_is_even(gender_world):
    mid = gender_world.means.mean(axis=0)
    np.testing.assert_allclose(bayes_posterior(gender_world, mid, "gender"), [0.5, 0.5], atol=1e-12)


def test_posterior_ignores_group_bias(gender_world):
    # the oracle uses a uniform prior over components, not the 80/20 group mix
    mid = gender_world.means.mean(axis=0)
    assert bayes_posterior(gender_world, mid, "gender")[0] == pytest.approx(0.5)


def test_oracle_accuracy(two_attr_world):
    data = sample_dataset(two_attr_world, "worker", 5000, 1)
    assert (classify(two_attr_world, data.samples, "gender") == data.labels[:, 0]).mean() >= 0.995


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_posterior_normalised_and_permutation_invariant(two_attr_world, seed):
    w = two_attr_world
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 6, (7, w.dim))
    post = bayes_posterior(w, x, "race")
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
    perm = rng.permutation(len(w.means))
    shuffled = type(w)(w.dim, w.attributes, w.labels[perm], w.means[perm], w.std,
                       {g: p[perm] for g, p in w.groups.items()}, w.vocab)
    np.testing.assert_allclose(bayes_posterior(shuffled, x, "race"), post, atol=1e-12)
