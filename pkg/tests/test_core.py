"""Data containers, policies, counter-based seeding and CSV round trips."""
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ope_shrink.core import (
    FullInfoDataset,
    LoggedData,
    TabularPolicy,
    check_absolute_continuity,
    importance_weights,
    load_multiclass_csv,
    read_logged_csv,
    true_policy_value,
    write_logged_csv,
    write_multiclass_csv,
)
from ope_shrink.errors import AbsoluteContinuityViolation, DataFormatError, InvalidSoftening
from ope_shrink.policies import (
    DeterministicPolicy,
    LinearScorer,
    SofteningParams,
    mask_columns,
    soften,
    softmax_linear_policy,
    train_multinomial_logistic,
)
from ope_shrink.rng import child_seed, uniform_from_keys


def _toy_full(n=60, k=3, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    labels = np.argmax(X[:, :k] + 0.3 * rng.normal(size=(n, k)), axis=1)
    return FullInfoDataset(X, labels, k)


class TestLoggedData:
    def test_rejects_bad_reward(self):
        with pytest.raises(ValueError, match="rewards"):
            LoggedData([0], [[0.0]], [0], [1.5], [0.5], 2)

    def test_rejects_action_out_of_range(self):
        with pytest.raises(ValueError, match="actions"):
            LoggedData([0], [[0.0]], [2], [1.0], [0.5], 2)

    def test_arrays_are_read_only(self):
        d = LoggedData([0, 1], [[0.0], [1.0]], [0, 1], [1.0, 0.0], [0.5, 0.5], 2)
        with pytest.raises(ValueError):
            d.rewards[0] = 0.3

    def test_slicing_keeps_logging_probs(self):
        mu = np.array([[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])
        d = LoggedData([0, 1, 2], np.eye(3), [0, 1, 0], [1, 0, 1], [0.5, 0.8, 0.9], 2, logging_probs=mu)
        s = d[1:]
        assert len(s) == 2
        np.testing.assert_array_equal(s.logging_probs, mu[1:])
        assert len(d[0]) == 1

    def test_samples_roundtrip(self):
        d = LoggedData([3, 4], [[0.1], [0.2]], [1, 0], [1.0, 0.0], [0.25, 0.75], 2)
        back = LoggedData.from_samples(list(d.samples()), 2)
        np.testing.assert_array_equal(back.context_ids, d.context_ids)
        np.testing.assert_array_equal(back.propensities, d.propensities)


class TestPolicies:
    def test_tabular_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TabularPolicy([[0.5, 0.4]])

    def test_uniform_is_shared(self):
        p = TabularPolicy.uniform(4)
        np.testing.assert_allclose(p.probs(np.zeros((3, 1)), np.arange(3)), 0.25)

    def test_deterministic_ties_go_to_lowest_action(self):
        scorer = LinearScorer(np.zeros((3, 2)), "all", 1)
        pol = DeterministicPolicy(scorer)
        np.testing.assert_array_equal(pol.actions(np.ones((2, 1))), [0, 0])

    def test_mask_columns(self):
        np.testing.assert_array_equal(mask_columns("first_half", 5), [0, 1])
        np.testing.assert_array_equal(mask_columns("second_half", 5), [2, 3, 4])
        with pytest.raises(ValueError):
            mask_columns("odd", 5)

    def test_softening_probabilities(self):
        data = _toy_full()
        base = DeterministicPolicy(train_multinomial_logistic(data, "all", reg=1.0))
        pol = soften(base, SofteningParams(0.7, 0.2, seed=4))
        P = pol.probs_for(data)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        top = P[np.arange(len(data)), base.actions(data.features)]
        assert np.all((top >= 0.6 - 1e-12) & (top <= 0.8 + 1e-12))
        # the other actions share the remainder equally
        rest = np.sort(P, axis=1)[:, :-1]
        np.testing.assert_allclose(rest[:, 0], rest[:, 1])

    def test_softening_noise_is_keyed_on_context_id(self):
        data = _toy_full()
        base = DeterministicPolicy(train_multinomial_logistic(data, "all", reg=1.0))
        pol = soften(base, SofteningParams(0.5, 0.4, seed=9))
        full = pol.probs_for(data)
        sub = data.subset(np.arange(10, 20))
        np.testing.assert_array_equal(pol.probs_for(sub), full[10:20])

    @pytest.mark.parametrize("alpha,beta", [(0.9, 0.4), (0.1, 0.3), (0.5, -0.1)])
    def test_invalid_softening(self, alpha, beta):
        with pytest.raises(InvalidSoftening):
            SofteningParams(alpha, beta)

    def test_soften_requires_deterministic_base(self):
        with pytest.raises(InvalidSoftening):
            soften(TabularPolicy.uniform(3), SofteningParams(0.5))

    def test_softmax_linear_sums_to_one(self):
        rng = np.random.default_rng(42)
        pol = softmax_linear_policy(rng.normal(size=3 * 3), k=3)
        P = pol.probs(rng.normal(size=(5, 2)), np.arange(5))
        np.testing.assert_allclose(P.sum(axis=1), 1.0)


class TestLogisticTraining:
    def test_gradient_norm_below_tol(self):
        data = _toy_full(n=200)
        scorer = train_multinomial_logistic(data, "first_half", reg=0.5, tol=1e-6)
        assert scorer.weights.shape == (3, 3)

    def test_scorer_json_roundtrip(self):
        scorer = train_multinomial_logistic(_toy_full(), "second_half", reg=1.0)
        back = LinearScorer.from_json(scorer.to_json())
        np.testing.assert_array_equal(back.weights, scorer.weights)
        assert back.mask == "second_half"


class TestValueAndWeights:
    def test_true_policy_value_deterministic(self):
        data = FullInfoDataset(np.zeros((4, 1)), [0, 1, 1, 2], 3)
        pol = TabularPolicy([0.2, 0.5, 0.3])
        assert true_policy_value(pol, data) == pytest.approx((0.2 + 0.5 + 0.5 + 0.3) / 4, abs=1e-15)

    def test_true_policy_value_stochastic(self):
        data = FullInfoDataset(np.zeros((2, 1)), [0, 1], 2)
        pol = TabularPolicy([1.0, 0.0])
        # hit 0.75, miss 0.25
        assert true_policy_value(pol, data, "stochastic") == pytest.approx(0.5)

    def test_absolute_continuity_listing(self):
        pi = TabularPolicy(np.array([[0.5, 0.5], [1.0, 0.0]]))
        mu = TabularPolicy(np.array([[1.0, 0.0], [0.5, 0.5]]))
        assert check_absolute_continuity(pi, mu, np.zeros((2, 1)), np.arange(2)) == [(0, 1)]

    def test_zero_propensity_raises(self):
        d = LoggedData([0], [[0.0]], [1], [1.0], [0.0], 2)
        with pytest.raises(AbsoluteContinuityViolation):
            importance_weights(TabularPolicy([0.5, 0.5]), d)


class TestCsv:
    def test_multiclass_roundtrip(self, tmp_path):
        data = _toy_full(n=12)
        write_multiclass_csv(data, tmp_path / "d.csv")
        meta = json.loads((tmp_path / "d.json").read_text())
        assert meta == {"k": 3, "feature_dim": 4}
        back = load_multiclass_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.labels, data.labels)
        np.testing.assert_array_equal(back.features, data.features)

    def test_bad_label_is_format_error(self, tmp_path):
        (tmp_path / "d.csv").write_text("label,f0\n5,0.1\n")
        (tmp_path / "d.json").write_text('{"k": 2, "feature_dim": 1}')
        with pytest.raises(DataFormatError):
            load_multiclass_csv(tmp_path / "d.csv")

    def test_logged_roundtrip(self, tmp_path):
        full = _toy_full(n=5)
        d = LoggedData(full.ids[[0, 2, 4]], full.features[[0, 2, 4]], [0, 1, 2], [1.0, 0.0, 1.0],
                       [0.5, 0.25, 0.125], 3)
        write_logged_csv(d, tmp_path / "log.csv")
        back = read_logged_csv(tmp_path / "log.csv", full)
        np.testing.assert_array_equal(back.features, d.features)
        np.testing.assert_array_equal(back.propensities, d.propensities)


class TestSeeding:
    def test_uniform_from_keys_range_and_stability(self):
        u = uniform_from_keys(7, np.arange(1000), stream=1)
        assert u.min() >= 0 and u.max() < 1
        np.testing.assert_array_equal(u[100:200], uniform_from_keys(7, np.arange(100, 200), stream=1))

    def test_streams_differ(self):
        assert not np.array_equal(uniform_from_keys(7, np.arange(5), 1), uniform_from_keys(7, np.arange(5), 2))

    def test_child_seed_paths(self):
        assert child_seed(1, 2, 3) == child_seed(1, 2, 3)
        assert child_seed(1, 2, 3) != child_seed(1, 3, 2)

    @given(st.integers(0, 2**63), st.lists(st.integers(0, 2**40), min_size=1, max_size=20))
    def test_uniform_keys_in_unit_interval(self, seed, keys):
        u = uniform_from_keys(seed, np.array(keys, dtype=np.int64))
        assert np.all((u >= 0) & (u < 1))
