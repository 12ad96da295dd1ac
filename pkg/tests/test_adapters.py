import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrdebias.adapters import (
    AdapterBank, AdapterPair, AttributeAdapter, adapter_orthogonality, init_adapter,
    orthogonality_loss, patch_weights, random_baseline, select, stack, unstack,
)
from attrdebias.errors import (
    AdapterShapeError, IncompleteAdapterError, IncongruentBanksError, IndicatorError, RevokedViewError,
)
from attrdebias.gradcheck import small_model


def random_adapter(model, category, rng, targets=None):
    targets = targets or model.adapter_targets()
    return AttributeAdapter(category, [
        AdapterPair(t, rng.standard_normal(model.weight_shape(t)[0]), rng.standard_normal(model.weight_shape(t)[1]))
        for t in targets
    ])


def random_bank(model, attribute, categories, rng, targets=None):
    return AdapterBank(attribute, categories, [random_adapter(model, c, rng, targets) for c in categories])


def test_stack_pads_with_zeros():
    a = AttributeAdapter("x", [AdapterPair("u", np.array([1.0, 2.0, 3.0]), np.array([1.0])),
                               AdapterPair("v", np.array([4.0, 5.0]), np.array([2.0, 3.0]))])
    P, Q = stack(a)
    np.testing.assert_array_equal(P, [[1, 4], [2, 5], [3, 0]])
    np.testing.assert_array_equal(Q, [[1, 2], [0, 3]])


def test_stack_zero_pairs_give_zero_matrices():
    a = AttributeAdapter("x", [AdapterPair("u", np.zeros(3), np.zeros(2))])
    P, Q = stack(a)
    assert not P.any() and not Q.any()


def test_stack_unstack_roundtrip(tiny_model, rng):
    a = random_adapter(tiny_model, "x", rng, tiny_model.adapter_targets("all"))
    P, Q = stack(a)
    b = unstack(P, Q, a.targets, [(len(p.p), len(p.q)) for p in a.pairs], "x")
    for u, v in zip(a.pairs, b.pairs):
        np.testing.assert_array_equal(u.p, v.p)
        np.testing.assert_array_equal(u.q, v.q)


def test_stack_missing_pair():
    with pytest.raises(IncompleteAdapterError):
        stack(AttributeAdapter("x", []))


def test_init_adapter_is_exact_noop(tiny_model, rng):
    a = init_adapter(tiny_model, "x", tiny_model.adapter_targets(), rng)
    x = rng.standard_normal((3, 4))
    view = patch_weights(tiny_model, a, 1.0)
    np.testing.assert_array_equal(view.forward(x, 2, 1), tiny_model.forward(x, 2, 1))


def test_select_one_hot(tiny_model, rng):
    bank = random_bank(tiny_model, "g", ["a", "b"], rng)
    assert select(bank, [0, 1]) is bank.adapters[1]
    assert select(bank, [1, 0]) is bank.adapters[0]
    for bad in ([0.5, 0.5], [1, 1], [0, 0], [1, 0, 0]):
        with pytest.raises(IndicatorError):
            select(bank, bad)


def test_select_equals_weighted_sum_for_one_hot(tiny_model, rng):
    bank = random_bank(tiny_model, "r", ["a", "b", "c", "d"], rng)
    h = np.array([0, 0, 1, 0])
    Ps = np.stack([stack(a)[0] for a in bank.adapters])
    np.testing.assert_array_equal(np.tensordot(h, Ps, axes=1), stack(select(bank, h))[0])


def test_select_ignores_unselected_scaling(tiny_model, rng):
    bank = random_bank(tiny_model, "g", ["a", "b"], rng)
    chosen = select(bank, [1, 0])
    for pair in bank.adapters[1].pairs:
        pair.p *= 1e6
    assert select(bank, [1, 0]) is chosen


def test_patch_zero_scale_bitwise_unchanged(tiny_model, rng):
    view = patch_weights(tiny_model, random_adapter(tiny_model, "x", rng), 0.0)
    x = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(view.forward(x, 5, 2), tiny_model.forward(x, 5, 2))


def test_patch_does_not_mutate_base(tiny_model, rng):
    before = {k: v.copy() for k, v in tiny_model.params.items()}
    view = patch_weights(tiny_model, random_adapter(tiny_model, "x", rng), 1.0)
    view.forward(rng.standard_normal((2, 4)), 1, 1)
    for k, v in tiny_model.params.items():
        np.testing.assert_array_equal(v, before[k])


def test_patch_target_mismatch(tiny_model, rng):
    other = small_model(0, token_dim=8)
    with pytest.raises(AdapterShapeError):
        patch_weights(tiny_model, random_adapter(other, "x", rng), 1.0)


def test_revoked_view_refuses(tiny_model, rng):
    view = patch_weights(tiny_model, random_adapter(tiny_model, "x", rng), 1.0)
    view.revoke()
    with pytest.raises(RevokedViewError):
        view.forward(np.zeros(4), 0, 0)


def test_two_views_equal_summed_terms_and_commute(tiny_model, rng):
    a, b = random_adapter(tiny_model, "a", rng), random_adapter(tiny_model, "b", rng)
    ab = patch_weights(patch_weights(tiny_model, a, 0.3, "g"), b, 0.3, "r")
    ba = patch_weights(patch_weights(tiny_model, b, 0.3, "r"), a, 0.3, "g")
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ab.forward(x, 1, 1), ba.forward(x, 1, 1))
    np.testing.assert_allclose(ab.forward(x, 1, 1), ab.dense().forward(x, 1, 1), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 20), scale=st.sampled_from([0.3, 1.0, -0.5]))
def test_view_matches_dense_oracle(seed, scale):
    model = small_model(seed % 5)
    rng = np.random.default_rng(seed)
    view = patch_weights(model, random_adapter(model, "x", rng, model.adapter_targets("all")), scale)
    x = rng.standard_normal((4, 4))
    np.testing.assert_allclose(view.forward(x, 3, 2), view.dense().forward(x, 3, 2), atol=1e-10, rtol=0)


def test_orthogonality_zero_for_zero_current(tiny_model, rng):
    prior = random_bank(tiny_model, "g", ["a", "b"], rng)
    cur = random_bank(tiny_model, "r", ["c", "d"], rng)
    for a in cur.adapters:
        for p in a.pairs:
            p.p[:] = 0
            p.q[:] = 0
    assert orthogonality_loss([prior], cur)[0] == 0.0


def test_orthogonality_zero_for_orthogonal_columns():
    e = np.eye(4)
    prior = AdapterBank("g", ["a"], [AttributeAdapter("a", [AdapterPair("u", e[0], e[0]), AdapterPair("v", e[1], e[1])])])
    cur = AdapterBank("r", ["b"], [AttributeAdapter("b", [AdapterPair("u", e[2], e[3]), AdapterPair("v", e[3], e[2])])])
    assert orthogonality_loss([prior], cur)[0] == 0.0


def test_orthogonality_identical_banks_dense_gram(tiny_model, rng):
    bank = random_bank(tiny_model, "g", ["a", "b"], rng)
    expected = 0.0
    for a in bank.adapters:
        P, Q = stack(a)
        expected += np.linalg.norm(P.T @ P) ** 2 + np.linalg.norm(Q.T @ Q) ** 2
    assert orthogonality_loss([bank], bank, "positional")[0] == pytest.approx(expected, rel=1e-12)


def test_orthogonality_positional_vs_all_pairs(tiny_model, rng):
    prior = random_bank(tiny_model, "g", ["a", "b"], rng)
    cur = random_bank(tiny_model, "r", ["c", "d", "e", "f"], rng)

    def gram(x, y):
        (Px, Qx), (Py, Qy) = stack(x), stack(y)
        return np.linalg.norm(Px.T @ Py) ** 2 + np.linalg.norm(Qx.T @ Qy) ** 2

    positional = sum(gram(prior.adapters[k], cur.adapters[k]) for k in range(2))
    every = sum(gram(p, c) for p in prior.adapters for c in cur.adapters)
    assert orthogonality_loss([prior], cur, "positional")[0] == pytest.approx(positional)
    assert orthogonality_loss([prior], cur, "all_pairs")[0] == pytest.approx(every)
    # slots beyond the prior bank's K are unpaired
    assert adapter_orthogonality([prior], cur.adapters[3], slot=3) == (0.0, {})


def test_orthogonality_incongruent_banks(tiny_model, rng):
    prior = random_bank(tiny_model, "g", ["a", "b"], rng, tiny_model.adapter_targets("all"))
    cur = random_bank(tiny_model, "r", ["c", "d"], rng)
    with pytest.raises(IncongruentBanksError):
        orthogonality_loss([prior], cur)


def test_random_baseline_positive(tiny_model, rng):
    prior = random_bank(tiny_model, "g", ["a", "b"], rng)
    cur = random_bank(tiny_model, "r", ["c", "d"], rng)
    assert random_baseline([prior], cur, 0) > 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_orthogonality_nonnegative(seed):
    model = small_model(1)
    rng = np.random.default_rng(seed)
    prior = random_bank(model, "g", ["a", "b"], rng)
    cur = random_bank(model, "r", ["c", "d", "e"], rng)
    assert orthogonality_loss([prior], cur)[0] >= 0


def test_bank_order_must_match_categories(tiny_model, rng):
    a, b = random_adapter(tiny_model, "a", rng), random_adapter(tiny_model, "b", rng)
    with pytest.raises(IncongruentBanksError):
        AdapterBank("g", ["a", "b"], [b, a])

