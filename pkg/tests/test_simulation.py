"""Supervised-to-bandit conversion, metrics and the replicate runner."""
import csv

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from ope_shrink.errors import BadFractions, LengthMismatch, TooFewSamples
from ope_shrink.simulation import (
    CDF_HEADER,
    RESULTS_HEADER,
    TTEST_HEADER,
    ExperimentCondition,
    LOGGING_POLICIES,
    PolicySpec,
    cdf_at,
    clipped_mse,
    condition_truth,
    make_synthetic_multiclass,
    paired_t_test,
    parse_roster,
    prepare_environment,
    relative_mse_cdf,
    run_condition,
    selection_report,
    split_bandit_data,
    supervised_to_bandit,
    write_cdf_csv,
    write_results_csv,
    write_ttest_csv,
)


@pytest.fixture(scope="module")
def env():
    return prepare_environment(make_synthetic_multiclass(800, 3, 6, 1.0, seed=1), "toy", seed=2)


class TestConversion:
    def test_propensities_and_rewards(self, env):
        logging = env.policy(LOGGING_POLICIES[0])
        d = supervised_to_bandit(env.pool, logging, 300, "deterministic", seed=5)
        rows = np.arange(len(d))
        np.testing.assert_array_equal(d.propensities, d.logging_probs[rows, d.actions])
        np.testing.assert_allclose(d.logging_probs, logging.probs(d.features, d.context_ids))
        labels = dict(zip(env.pool.ids, env.pool.labels))
        np.testing.assert_array_equal(d.rewards, [float(a == labels[i]) for i, a in zip(d.context_ids, d.actions)])

    def test_action_frequencies(self, env):
        # uniform logging: each action about 1/3 of the time
        d = supervised_to_bandit(env.pool, env.policy(PolicySpec("uniform")), 6000, seed=1)
        freq = np.bincount(d.actions, minlength=3) / 6000
        np.testing.assert_allclose(freq, 1 / 3, atol=0.03)

    def test_stochastic_rewards_rate(self, env):
        d = supervised_to_bandit(env.pool, env.policy(PolicySpec("pi1", 1.0, 0.0)), 8000, "stochastic", seed=3)
        labels = dict(zip(env.pool.ids, env.pool.labels))
        hit = np.array([a == labels[i] for i, a in zip(d.context_ids, d.actions)])
        assert abs(d.rewards[hit].mean() - 0.75) < 0.03
        assert abs(d.rewards[~hit].mean() - 0.25) < 0.05

    def test_seeded(self, env):
        a = supervised_to_bandit(env.pool, env.policy(LOGGING_POLICIES[1]), 50, seed=9)
        b = supervised_to_bandit(env.pool, env.policy(LOGGING_POLICIES[1]), 50, seed=9)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.context_ids, b.context_ids)

    def test_holdout_fraction(self, env):
        assert len(env.holdout) == 200 and len(env.pool) == 600
        assert not set(env.holdout.ids) & set(env.pool.ids)

    def test_truth_on_holdout_or_pool(self, env):
        cond = ExperimentCondition("toy", LOGGING_POLICIES[0])
        assert 0.0 <= condition_truth(env, cond) <= 1.0
        assert condition_truth(env, cond, "pool") != condition_truth(env, cond, "holdout")


class TestSplit:
    @given(st.integers(1, 500))
    def test_sizes(self, n):
        parts = split_bandit_data(np.arange(n), (0.25, 0.25, 0.25, 0.25))
        assert sum(len(p) for p in parts) == n
        assert [len(p) for p in parts[:3]] == [n // 4] * 3
        np.testing.assert_array_equal(np.concatenate(parts), np.arange(n))

    def test_bad_fractions(self):
        with pytest.raises(BadFractions):
            split_bandit_data(np.arange(10), (0.5, 0.6))
        with pytest.raises(BadFractions):
            split_bandit_data(np.arange(10), (1.5, -0.5))


class TestMetrics:
    def test_clipped_mse(self):
        assert clipped_mse([0.0, 3.0], 0.5) == pytest.approx((0.25 + 1.0) / 2)

    def test_t_test_matches_scipy(self, rng):
        a, b = rng.random(40), rng.random(40)
        t, p = paired_t_test(a, b)
        ref = scipy.stats.ttest_rel(a, b)
        assert t == pytest.approx(ref.statistic, rel=1e-12)
        assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_t_test_degenerate(self):
        assert paired_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
        t, p = paired_t_test([2, 3, 4], [1, 2, 3])
        assert t == np.inf and p == 0.0
        with pytest.raises(LengthMismatch):
            paired_t_test([1, 2], [1, 2, 3])
        with pytest.raises(TooFewSamples):
            paired_t_test([1], [2])

    def test_relative_cdf(self):
        table = relative_mse_cdf([1.0, 4.0, 2.0], [2.0, 2.0, 2.0])
        assert table == [(0.5, 1 / 3), (1.0, 2 / 3), (2.0, 1.0)]
        assert cdf_at(table, 1.0) == pytest.approx(2 / 3)
        assert cdf_at(table, 0.1) == 0.0


class TestRoster:
    def test_parse(self):
        r = parse_roster(["dm:w_sq", "drs-direct", "ips"])
        assert r[0].predictors == ("w_sq",)
        assert r[1].predictors == ("zero_predictor", "w_sq")
        assert r[2].predictors == ()

    @pytest.mark.parametrize("names", [["bogus"], ["dr:nope"], ["ips:w"], ["dr", "dr"]])
    def test_errors(self, names):
        with pytest.raises(ValueError):
            parse_roster(names)


ROSTER = ("dm:w_sq", "ips", "snips", "dr", "sndr", "switch", "drs-direct", "drs-upper", "drs-oracle",
          "dros-oracle", "drps-oracle")


@pytest.fixture(scope="module")
def result(env):
    cond = ExperimentCondition("toy", LOGGING_POLICIES[3], n=200, replicates=6, seed=4)
    return run_condition(env, cond, ROSTER)


class TestRunCondition:
    roster = ROSTER

    def test_shapes(self, result):
        assert result.estimates.shape == (6, len(self.roster))
        assert np.all(np.isfinite(result.estimates))

    def test_oracle_dominates_grid_members(self, result):
        se = result.squared_errors()
        col = {n: j for j, n in enumerate(result.names)}
        for j in (col["dm:w_sq"], col["dr"], col["dros-oracle"], col["drps-oracle"]):
            assert np.all(se[:, col["drs-oracle"]] <= se[:, j])

    def test_threads_do_not_change_results(self, env, result):
        again = run_condition(env, result.condition, self.roster, threads=3)
        np.testing.assert_array_equal(again.estimates, result.estimates)
        assert again.chosen == result.chosen

    def test_reports(self, result, tmp_path):
        write_results_csv([result], tmp_path / "r.csv")
        write_ttest_csv([result], tmp_path / "t.csv")
        write_cdf_csv([result], tmp_path / "c.csv")
        rows = list(csv.reader((tmp_path / "r.csv").open()))
        assert rows[0] == RESULTS_HEADER and len(rows) == 1 + len(self.roster)
        rows = list(csv.reader((tmp_path / "t.csv").open()))
        assert rows[0] == TTEST_HEADER and len(rows) == 1 + len(self.roster) * (len(self.roster) - 1) // 2
        rows = list(csv.reader((tmp_path / "c.csv").open()))
        assert rows[0] == CDF_HEADER
        assert {r[1] for r in rows[1:]} == set(self.roster)

    def test_selection_report(self, env, result):
        specs, scores, chosen = selection_report(env, result.condition)
        obj = [s.objective for s in scores]
        assert obj[chosen] == min(obj)
        assert len(specs) == 2 * 2 * 32
