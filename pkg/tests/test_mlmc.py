import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from henry_mlmc.mlmc import (
    LevelStats, MlmcError, MlmcPlan, RateFit, ShiftedAccumulator, accumulate_level,
    allocate_samples, choose_num_levels, compare_costs, estimate, extrapolate_costs,
    extrapolate_variances, fit_rates, fit_rates_from_stats, make_plan, mc_cost, regime,
    time_average_E0,
)

import reference_inputs as ref
from helpers import allocation_optimality_report


# ---------------------------------------------------------------- accumulators

def test_identical_samples_have_zero_variance():
    acc = ShiftedAccumulator()
    for _ in range(10):
        acc.add(np.array([1e9 + 0.1, -3.7]))
    assert np.array_equal(acc.variance, [0.0, 0.0])
    assert np.array_equal(acc.mean, [1e9 + 0.1, -3.7])


def test_two_samples_closed_form():
    acc = ShiftedAccumulator()
    acc.add(3.0)
    acc.add(7.5)
    assert acc.mean == 5.25
    assert acc.variance == pytest.approx((3.0 - 7.5) ** 2 / 2, rel=1e-15)


def test_single_sample_variance_unavailable():
    acc = ShiftedAccumulator()
    acc.add(np.ones(3))
    assert np.all(np.isnan(acc.variance))
    with pytest.raises(MlmcError):
        ShiftedAccumulator().mean


def test_shape_mismatch_rejected():
    acc = ShiftedAccumulator()
    acc.add(np.ones(3))
    with pytest.raises(MlmcError):
        acc.add(np.ones(4))


def test_synthetic_normal_within_monte_carlo_bands():
    rng = np.random.default_rng(0)
    mu, sigma, n = 2.0, 0.5, 1000
    acc = ShiftedAccumulator()
    for x in rng.normal(mu, sigma, n):
        acc.add(x)
    assert abs(acc.mean - mu) <= 4 * sigma / math.sqrt(n)
    # standard error of the sample variance is sigma^2 sqrt(2 / (n - 1))
    assert abs(acc.variance - sigma**2) <= 4 * sigma**2 * math.sqrt(2 / (n - 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40), st.floats(-1e8, 1e8))
def test_accumulator_matches_two_pass_formula(xs, offset):
    x = np.array(xs) + offset
    acc = ShiftedAccumulator()
    for v in x:
        acc.add(v)
    assert acc.mean == pytest.approx(x.mean(), rel=1e-12, abs=1e-6)
    assert acc.variance == pytest.approx(np.var(x - x[0], ddof=1), rel=1e-7, abs=1e-6)


def test_accumulate_level_pairs():
    t = np.array([1.0, 2.0])
    pairs = [(np.array([3.0, 4.0]), np.array([1.0, 1.0])),
             (np.array([5.0, 6.0]), np.array([2.0, 2.0]))]
    st_ = accumulate_level(1, t, pairs, costs=[1.0, 3.0])
    assert st_.m == 2
    assert np.allclose(st_.mean_diff, [2.5, 3.5])
    assert np.allclose(st_.V, [0.5, 0.5])
    assert np.allclose(st_.mean_fine, [4.0, 5.0])
    assert st_.s == 2.0
    with pytest.raises(MlmcError):
        accumulate_level(0, t, pairs)
    with pytest.raises(MlmcError):
        accumulate_level(1, t, [(np.zeros(2), None)])
    with pytest.raises(MlmcError):
        accumulate_level(1, t, [])


# ---------------------------------------------------------------- rate fits

@pytest.mark.parametrize("law", [(0.9, 3.25, 1.7, 4.8), (1.82, 1.95, 2.5, -0.67)])
def test_fit_rates_exact_recovery(law):
    alpha, z1, beta, z2 = law
    levels = np.arange(4)
    E = 4.0 ** (z1 - alpha * levels)
    V = 4.0 ** (z2 - beta * levels)
    s = 0.6 * 4.0 ** (3 * levels)
    fit = fit_rates(levels, E, V, s)
    for got, want in zip((fit.alpha, fit.zeta1, fit.beta, fit.zeta2), law):
        assert got == pytest.approx(want, abs=1e-10)
    assert fit.gamma == pytest.approx(1.0, abs=1e-12)


def test_fit_uses_absolute_means_and_skips_level0():
    levels = np.arange(4)
    E = -(4.0 ** (1.0 - 0.5 * levels))
    E[0] = 1e6      # level 0 is g_0 itself and never enters the fit
    fit = fit_rates(levels, E, 4.0 ** (2.0 - levels))
    assert fit.alpha == pytest.approx(0.5, abs=1e-12)
    assert fit.levels_used["weak"] == [1, 2, 3]


def test_fit_excludes_non_positive_values(caplog):
    levels = np.arange(5)
    V = 4.0 ** (2.0 - 2.0 * levels)
    V[2] = 0.0
    with caplog.at_level(logging.WARNING):
        fit = fit_rates(levels, V, V)
    assert "excluding" in caplog.text
    assert fit.beta == pytest.approx(2.0, abs=1e-12)
    assert fit.levels_used["strong"] == [1, 3, 4]


def test_fit_needs_two_levels():
    with pytest.raises(MlmcError):
        fit_rates([0, 1], [1.0, 0.5], [1.0, 0.5])


def _stats(level, times, mean_diff, V, s=1.0, m=10):
    return LevelStats(level, m, np.asarray(times, float), np.asarray(mean_diff, float),
                      np.asarray(V, float), np.asarray(mean_diff, float), np.asarray(V, float), s)


def test_fit_rates_from_stats_reads_calibration_time():
    times = [64.0, 640.0]
    stats = [_stats(l, times, [9.0, 4.0 ** (3.25 - 0.9 * l)], [9.0, 4.0 ** (4.8 - 1.7 * l)],
                    s=4.0 ** (3 * l)) for l in range(4)]
    fit = fit_rates_from_stats(stats, 640.0)
    assert fit.alpha == pytest.approx(0.9, abs=1e-10)
    assert fit.beta == pytest.approx(1.7, abs=1e-10)
    with pytest.raises(MlmcError):
        fit_rates_from_stats(stats, 100.0)
    with pytest.raises(MlmcError):
        fit_rates_from_stats(stats[:2], 640.0)


# ---------------------------------------------------------------- number of levels

def test_levels_for_published_accuracies():
    got = [choose_num_levels(e, ref.ALPHA, ref.ZETA1, ref.E0).L for e in ref.EPSILONS]
    assert got == ref.LEVELS_REQUIRED


def test_level_interval_of_E0():
    lo, hi = ref.e0_interval()
    assert lo == pytest.approx(124.36, abs=0.01) and hi == pytest.approx(211.12, abs=0.01)
    for E0 in (lo * (1 + 1e-12), 0.5 * (lo + hi), hi * (1 - 1e-12)):
        assert [choose_num_levels(e, ref.ALPHA, ref.ZETA1, E0).L
                for e in ref.EPSILONS] == ref.LEVELS_REQUIRED
    # below the interval the finest accuracy needs a fifth level (clamped and flagged)
    below = choose_num_levels(ref.EPSILONS[-1], ref.ALPHA, ref.ZETA1, 0.99 * lo)
    assert below.bias_limited
    assert choose_num_levels(ref.EPSILONS[-1], ref.ALPHA, ref.ZETA1, 0.99 * lo, L_max=9).L == 5
    assert [choose_num_levels(e, ref.ALPHA, ref.ZETA1, hi * (1 + 1e-12)).L
            for e in ref.EPSILONS] == [2, 2, 4, 4]


def test_no_levels_needed_for_loose_tolerance():
    assert choose_num_levels(10.0, 0.9, 3.25, 160.0).L == 0


def test_level_count_clamped_and_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        ch = choose_num_levels(1e-6, 0.9, 3.25, 160.0, L_max=3)
    assert ch.L == 4 and ch.bias_limited
    assert "bias-limited" in caplog.text


def test_tail_correction_needs_more_levels():
    plain = choose_num_levels(0.01, 0.9, 3.25, 160.0, L_max=10)
    tail = choose_num_levels(0.01, 0.9, 3.25, 160.0, L_max=10, tail_correction=True)
    # the sum of all remaining differences exceeds the next one by 1 / (1 - 4^-alpha)
    shift = -math.log(1.0 - 4.0 ** -0.9, 4.0) / 0.9
    assert tail.raw == pytest.approx(plain.raw + shift, rel=1e-12)


def test_level_inputs_validated():
    with pytest.raises(MlmcError):
        choose_num_levels(0.0, 0.9, 3.25, 1.0)
    with pytest.raises(MlmcError):
        choose_num_levels(0.1, 0.9, 3.25, 0.0)


# ---------------------------------------------------------------- allocation

def test_allocation_closed_form():
    eps = 0.1
    a = allocate_samples(eps, [4.0, 1.0], [1.0, 4.0])
    assert np.allclose(a.m_real, [16 / eps**2, 4 / eps**2], rtol=1e-12)
    assert np.sum(np.array([4.0, 1.0]) / a.m_real) == pytest.approx(eps**2 / 2, rel=1e-12)
    assert a.variance <= a.target * (1 + 1e-12)


def test_single_level_is_classical_monte_carlo():
    eps, V0, E0 = 0.05, 3.0, 2.0
    a = allocate_samples(eps, [V0], [7.0], E0)
    assert a.m[0] == math.ceil(2 * V0 / (eps**2 * E0**2))


def test_published_counts_at_finest_accuracy():
    a = allocate_samples(0.007, ref.published_variances(), ref.WALL_TIMES, ref.E0)
    assert a.m.tolist() == ref.SAMPLES[-1]


def test_all_zero_variances(caplog):
    with caplog.at_level(logging.WARNING):
        a = allocate_samples(0.1, [0.0, 0.0], [1.0, 2.0])
    assert a.m.tolist() == [1, 1]
    assert "zero" in caplog.text


def test_allocation_input_validation():
    with pytest.raises(MlmcError):
        allocate_samples(0.1, [1.0], [0.0])
    with pytest.raises(MlmcError):
        allocate_samples(0.1, [1.0, 2.0], [1.0])
    with pytest.raises(MlmcError):
        allocate_samples(-0.1, [1.0], [1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-6, 1e3), st.floats(1e-3, 1e4)), min_size=1, max_size=5),
       st.floats(1e-3, 1.0), st.floats(1e-2, 1e3))
def test_allocation_meets_variance_constraint(vs, eps, E0):
    V, s = map(np.array, zip(*vs))
    a = allocate_samples(eps, V, s, E0)
    assert np.all(a.m >= 1)
    assert a.variance <= a.target * (1 + 1e-12)
    assert a.S <= a.S_rounded * (1 + 1e-12) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e2), min_size=1, max_size=4), st.floats(1e-3, 1.0),
       st.floats(0.3, 3.0))
def test_allocation_grows_as_tolerance_shrinks(V, eps, shrink):
    s = 4.0 ** (3 * np.arange(len(V)))
    a = allocate_samples(eps, V, s)
    b = allocate_samples(eps / (1 + shrink), V, s)
    assert np.all(b.m >= a.m) and b.S > a.S


def test_allocation_near_exhaustive_optimum():
    worst, feasible = allocation_optimality_report(20)
    assert feasible and 1.0 <= worst <= 1.10


# ---------------------------------------------------------------- estimator

def test_variance_of_estimator_example():
    t = [640.0]
    stats = [_stats(0, t, [1.0], [4.0], m=16), _stats(1, t, [0.1], [1.0], m=4)]
    res = estimate(stats)
    assert res.variance[0] == pytest.approx(0.5)
    assert res.Y[0] == pytest.approx(1.1)


def test_single_level_estimator_is_plain_mean():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 3))
    t = np.array([1.0, 2.0, 3.0])
    st0 = accumulate_level(0, t, [(row, None) for row in x])
    assert np.allclose(estimate([st0]).Y, x.mean(axis=0), rtol=1e-14)


def test_shared_samples_telescope_to_fine_mean():
    rng = np.random.default_rng(3)
    t = np.arange(1.0, 6.0)
    g = [rng.normal(10.0, 1.0, size=(8, 5)) * (1 + 0.1 * l) for l in range(3)]
    stats = [accumulate_level(l, t, [(g[l][i], None if l == 0 else g[l - 1][i])
                                     for i in range(8)]) for l in range(3)]
    Y = estimate(stats).Y
    assert np.allclose(Y, g[2].mean(axis=0), rtol=1e-12, atol=0)


def test_estimator_rejects_gaps_and_misaligned_times():
    t = [1.0]
    with pytest.raises(MlmcError):
        estimate([_stats(0, t, [1.0], [1.0]), _stats(2, t, [1.0], [1.0])])
    with pytest.raises(MlmcError):
        estimate([_stats(0, t, [1.0], [1.0]), _stats(1, [2.0], [1.0], [1.0])])
    with pytest.raises(MlmcError):
        estimate([])


def test_estimator_flags_missing_variance():
    t = [1.0]
    res = estimate([_stats(0, t, [1.0], [np.nan], m=1)])
    assert np.isnan(res.variance[0])


# ---------------------------------------------------------------- complexity

def test_published_regime_and_exponents():
    r = regime(0.9, 1.7, 1.0, 3.0)
    assert r["label"] == "beta < d*gamma"
    assert round(r["mlmc_exponent"], 2) == 3.44
    assert round(r["mc_exponent"], 2) == 5.33
    assert r["applicable"]


def test_other_regimes():
    assert regime(1.0, 4.0)["label"] == "beta > d*gamma"
    assert regime(1.0, 4.0)["mlmc_exponent"] == 2.0
    eq = regime(2.0, 3.0)
    assert eq["label"] == "beta = d*gamma" and eq["log_factor"]


def test_mc_cost_formula():
    assert mc_cost(0.1, 5.0, 2.0, 1.0) == pytest.approx(2 * 5.0 * 2.0 / 0.01)


def test_extrapolation_helpers():
    assert np.allclose(extrapolate_costs([1.0, 10.0], 4), [1.0, 10.0, 640.0, 40960.0])
    with pytest.raises(MlmcError):
        extrapolate_costs([float("nan")], 2)
    fit = RateFit(1.0, 1.0, 2.0, 3.0, 1.0, 0.0)
    assert np.allclose(extrapolate_variances([5.0], 3, fit), [5.0, 4.0, 4.0 ** -1])


def test_time_average_E0():
    st0 = _stats(0, [1.0, 2.0], [-3.0, -5.0], [1.0, 1.0])
    assert time_average_E0(st0) == 4.0
    with pytest.raises(MlmcError):
        time_average_E0(_stats(0, [1.0], [0.0], [1.0]))


def test_published_cost_table():
    rows = compare_costs(ref.EPSILONS, ref.q9_rates(), ref.published_variances(),
                         ref.WALL_TIMES, ref.E0)
    assert [r["L"] for r in rows] == ref.LEVELS_REQUIRED
    for r, S in zip(rows, ref.COST_MLMC):
        assert r["S"] == pytest.approx(S, rel=0.03)
    for r, m in zip(rows, ref.SAMPLES):
        assert np.all(np.abs(np.array(r["m"]) - np.array(m)) <= 1)
    assert rows[-1]["m"] == ref.SAMPLES[-1]
    assert all(r["ratio"] > 1 for r in rows)


def test_plan_round_trip():
    p = make_plan(0.05, ref.q9_rates(), ref.E0, ref.published_variances()[:3],
                  ref.WALL_TIMES[:3], qoi="Q_9")
    assert p.L == 3 and p.n_levels == 3
    assert MlmcPlan.from_dict(p.to_dict()) == p
