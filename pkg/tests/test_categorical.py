import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_decoding.categorical import (
    DecodingAction,
    apply_action,
    apply_actions,
    apply_temperature,
    entropy,
    min_p_filter,
    sample,
    softmax,
    top_k_filter,
    top_p_filter,
)
from adaptive_decoding.exceptions import InvalidInputError, InvalidParameterError
from reference import ref_apply, ref_min_p, ref_softmax_mp, ref_top_k, ref_top_p


def random_dist(draw_vals):
    p = np.asarray(draw_vals, dtype=np.float64)
    return p / p.sum()


dists = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=16).filter(lambda v: sum(v) > 1e-3).map(random_dist)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("c", [-700.0, -3.0, 0.0, 12.5, 900.0])
    def test_shift_invariance(self, c):
        np.testing.assert_allclose(softmax([c, c + math.log(2)]), [1 / 3, 2 / 3], rtol=1e-12)

    def test_against_high_precision(self):
        expected = ref_softmax_mp([1.0, 2.0, 3.0])
        # frozen from the 50-digit oracle
        assert expected == pytest.approx([0.09003057317038046, 0.24472847105479767, 0.6652409557748219], rel=1e-15)
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), expected, rtol=1e-14)
        assert abs(softmax([1.0, 2.0, 3.0]).sum() - 1) < 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            softmax([0.0, np.inf])
        with pytest.raises(InvalidInputError):
            softmax([np.nan])


class TestTemperature:
    def test_identity(self):
        np.testing.assert_array_equal(apply_temperature([1, 2, 3], 1.0), [1, 2, 3])

    def test_divides(self):
        np.testing.assert_array_equal(apply_temperature([2, 4], 2.0), [1, 2])

    def test_sharpens_and_keeps_argmax(self):
        cold = softmax(apply_temperature([1, 2, 3], 0.5))
        warm = softmax([1, 2, 3])
        assert cold.argmax() == warm.argmax() == 2
        assert cold[2] > warm[2]

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_rejects_non_positive(self, T):
        with pytest.raises(InvalidParameterError):
            apply_temperature([1.0], T)


class TestFilters:
    def test_top_k_identity(self):
        np.testing.assert_array_equal(top_k_filter([0.5, 0.3, 0.2], 3), [0.5, 0.3, 0.2])

    def test_top_k_truncates(self):
        np.testing.assert_allclose(top_k_filter([0.5, 0.3, 0.2], 2), [0.625, 0.375, 0.0], rtol=1e-15)
        assert ref_top_k([0.5, 0.3, 0.2], 2) == pytest.approx([0.625, 0.375, 0.0])

    def test_top_k_tie_break(self):
        np.testing.assert_array_equal(top_k_filter([0.25] * 4, 2), [0.5, 0.5, 0.0, 0.0])
        # exhaustive check of the tie rule: among equal entries the kept ones are the lowest indices
        for k in range(1, 5):
            kept = np.flatnonzero(top_k_filter([0.25] * 4, k))
            assert list(kept) == list(range(k))

    def test_top_p(self):
        np.testing.assert_array_equal(top_p_filter([0.5, 0.3, 0.2], 1.0), [0.5, 0.3, 0.2])
        np.testing.assert_allclose(top_p_filter([0.5, 0.3, 0.2], 0.8), [0.625, 0.375, 0.0], rtol=1e-15)
        np.testing.assert_allclose(top_p_filter([0.5, 0.3, 0.2], 0.9), [0.5, 0.3, 0.2], rtol=1e-15)
        assert ref_top_p([0.5, 0.3, 0.2], 0.8) == pytest.approx([0.625, 0.375, 0.0])

    def test_min_p(self):
        d = [0.6, 0.25, 0.1, 0.05]
        np.testing.assert_array_equal(min_p_filter(d, 0.0), d)
        np.testing.assert_allclose(min_p_filter(d, 0.2), [12 / 17, 5 / 17, 0, 0], rtol=1e-15)
        assert ref_min_p(d, 0.2) == pytest.approx([12 / 17, 5 / 17, 0, 0])
        np.testing.assert_array_equal(min_p_filter([0.25] * 4, 0.9), [0.25] * 4)

    @pytest.mark.parametrize(
        "fn,arg",
        [(top_k_filter, 0), (top_k_filter, 1.5), (top_p_filter, 0.0), (top_p_filter, 1.1), (min_p_filter, 1.0), (min_p_filter, -0.1)],
    )
    def test_parameter_validation(self, fn, arg):
        with pytest.raises(InvalidParameterError):
            fn([0.5, 0.5], arg)

    def test_rejects_unnormalized(self):
        with pytest.raises(InvalidInputError):
            top_k_filter([0.5, 0.6], 1)

    @settings(max_examples=200, deadline=None)
    @given(dists, st.integers(1, 20), st.floats(0.01, 1.0), st.floats(0.0, 0.99))
    def test_idempotent(self, p, k, tp, mp):
        for fn, arg in ((top_k_filter, k), (min_p_filter, mp)):
            once = fn(p, arg)
            np.testing.assert_allclose(fn(once, arg), once, rtol=1e-12, atol=0)

    def test_min_p_entry_on_threshold_survives_renormalization(self):
        p = np.array([1.0, 1.0, 0.921875, 0.25]) / 3.171875
        once = min_p_filter(p, 0.921875)
        assert np.count_nonzero(once) == 3
        np.testing.assert_array_equal(min_p_filter(once, 0.921875), once)

    def test_top_p_is_not_idempotent(self):
        # renormalizing the kept prefix can lift a shorter prefix over p
        once = top_p_filter([1 / 3] * 3, 0.5)
        np.testing.assert_allclose(once, [0.5, 0.5, 0.0])
        np.testing.assert_array_equal(top_p_filter(once, 0.5), [1.0, 0.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(dists, st.floats(0.01, 1.0))
    def test_top_p_reapplication_only_shrinks_support(self, p, tp):
        once = top_p_filter(p, tp)
        twice = top_p_filter(once, tp)
        assert set(np.flatnonzero(twice)) <= set(np.flatnonzero(once))

    @settings(max_examples=200, deadline=None)
    @given(dists, st.integers(1, 20), st.floats(0.01, 1.0), st.floats(0.0, 0.99))
    def test_keep_top_element(self, p, k, tp, mp):
        top = int(np.argmax(p))
        for out in (top_k_filter(p, k), top_p_filter(p, tp), min_p_filter(p, mp)):
            assert int(np.argmax(out)) == top
            assert abs(out.sum() - 1) < 1e-9 and out.min() >= 0

    @settings(max_examples=100, deadline=None)
    @given(dists)
    def test_off_settings_are_exact_identity(self, p):
        np.testing.assert_array_equal(top_k_filter(p, p.size), p)
        np.testing.assert_array_equal(top_p_filter(p, 1.0), p)
        np.testing.assert_array_equal(min_p_filter(p, 0.0), p)
        z = np.log(np.maximum(p, 1e-300))
        np.testing.assert_array_equal(apply_temperature(z, 1.0), z)


class TestApplyAction:
    def test_greedy_is_point_mass(self):
        out = apply_action([0.1, 3.0, 3.0, -1.0], DecodingAction.make_greedy())
        np.testing.assert_array_equal(out, [0, 1, 0, 0])
        assert entropy(out) == 0.0

    def test_plain_temperature(self):
        np.testing.assert_allclose(apply_action([1, 2, 3], DecodingAction(temperature=1.0)), softmax([1, 2, 3]), rtol=0, atol=0)

    def test_composition_order(self):
        a = DecodingAction(temperature=0.5, top_k=2, top_p=0.95, min_p=0.1)
        expected = ref_apply([1, 2, 3], temperature=0.5, top_k=2, top_p=0.95, min_p=0.1)
        np.testing.assert_allclose(apply_action([1, 2, 3], a), expected, rtol=1e-12)
        # T=0.5 gives (e^-4, e^-2, 1)/Z; top-2 keeps the last two; their mass
        # 1/(1+e^-2) ~ 0.881 < 0.95 so top-p keeps both; min-p at 0.1 * 0.881 keeps both
        q = math.exp(-2)
        np.testing.assert_allclose(apply_action([1, 2, 3], a), [0, q / (1 + q), 1 / (1 + q)], rtol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-20, 20), min_size=1, max_size=12),
        st.sampled_from([0.3, 0.5, 1.0, 1.25]),
        st.sampled_from([None, 1, 5]),
        st.sampled_from([None, 0.9, 0.95]),
        st.sampled_from([None, 0.1, 0.2]),
    )
    def test_output_is_distribution(self, z, T, k, tp, mp):
        out = apply_action(z, DecodingAction(temperature=T, top_k=k, top_p=tp, min_p=mp))
        assert out.min() >= 0 and abs(out.sum() - 1) < 1e-9
        # the most likely output token is a most likely tempered token; ties are
        # decided on the tempered probabilities, which rounding can create
        tempered = softmax(np.asarray(z) / T)
        assert tempered[int(np.argmax(out))] == tempered.max()

    def test_pool_rows_match_single_actions(self):
        pool = [
            DecodingAction.make_greedy(),
            DecodingAction(temperature=0.3, top_k=2, top_p=0.9, min_p=0.2),
            DecodingAction(temperature=1.25, top_p=0.95),
            DecodingAction(temperature=0.75, min_p=0.1),
        ]
        z = np.random.default_rng(0).normal(size=9)
        rows = apply_actions(z, pool)
        for j, a in enumerate(pool):
            np.testing.assert_array_equal(rows[j], apply_action(z, a))
            np.testing.assert_allclose(rows[j], ref_apply(z.tolist(), a.greedy, a.temperature, a.top_k, a.top_p, a.min_p), rtol=1e-12)

    def test_action_validation(self):
        with pytest.raises(InvalidParameterError):
            DecodingAction(greedy=True, temperature=1.0)
        with pytest.raises(InvalidParameterError):
            DecodingAction(temperature=0.0)
        with pytest.raises(InvalidParameterError):
            DecodingAction(temperature=1.0, top_p=0.0)

    def test_round_trip(self):
        for a in (DecodingAction.make_greedy(), DecodingAction(temperature=0.75, top_k=10, top_p=0.95, min_p=0.1)):
            assert DecodingAction.from_dict(a.to_dict()) == a


class TestEntropy:
    def test_point_mass(self):
        assert entropy([0, 0, 1.0]) == 0.0

    @pytest.mark.parametrize("m", [1, 2, 7, 64])
    def test_uniform(self, m):
        assert entropy(np.full(m, 1 / m)) == pytest.approx(math.log(m), rel=1e-12)

    def test_zero_entries(self):
        assert entropy([0.5, 0.5, 0.0]) == pytest.approx(math.log(2), rel=1e-15)


class TestSample:
    def test_point_mass(self):
        rng = np.random.default_rng(0)
        assert all(sample([0, 0, 1.0, 0], rng) == 2 for _ in range(200))

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(1)
        n = 100_000
        counts = np.bincount([sample([0.25] * 4, rng) for _ in range(n)], minlength=4)
        sigma = math.sqrt(n * 0.25 * 0.75)
        assert np.all(np.abs(counts - n / 4) < 4 * sigma)

    def test_deterministic_given_stream(self):
        d = [0.1, 0.2, 0.3, 0.4]
        a = [sample(d, np.random.default_rng(42)) for _ in range(5)]
        assert len(set(a)) == 1

    def test_never_picks_zero_mass(self):
        rng = np.random.default_rng(3)
        d = [0.0, 0.5, 0.0, 0.5, 0.0]
        assert {sample(d, rng) for _ in range(2000)} == {1, 3}
