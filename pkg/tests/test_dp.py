import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from fedsim import rand
from fedsim.dp import (
    GaussianParams,
    LdpParams,
    NoisedHistogram,
    PrivacyBudget,
    add_central_noise,
    count_sensitivity,
    gaussian_sigma,
    k_anon_filter,
    ldp_debias,
    ldp_debias_exact,
    ldp_perturb,
    split_budget,
    st_participation,
    sum_sensitivity,
)
from fedsim.errors import BudgetExhausted, DegenerateError, DomainError

# Independently computed with 50-digit decimal arithmetic:
# sqrt(2 * ln(1.25e8)) = 6.1063613216491824670719493753992...
SIGMA_EPS1_DELTA1E8 = 6.1063613216491825


def test_gaussian_sigma_reference_value():
    assert gaussian_sigma(1.0, 1e-8, 1.0) == pytest.approx(SIGMA_EPS1_DELTA1E8, abs=1e-12)


def test_gaussian_sigma_linearity():
    base = gaussian_sigma(1.0, 1e-8, 1.0)
    assert gaussian_sigma(1.0, 1e-8, 2.0) == pytest.approx(2 * base)
    assert gaussian_sigma(0.5, 1e-8, 1.0) == pytest.approx(2 * base)


def test_gaussian_sigma_forced_log_half():
    # delta = 1.25 / e^0.5 makes ln(1.25/delta) = 1/2, so sigma = 1 exactly
    delta = 1.25 / math.exp(0.5)
    assert gaussian_sigma(1.0, delta, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_gaussian_sigma_monotone_in_eps_and_delta():
    sigmas_eps = [gaussian_sigma(e, 1e-8, 1.0) for e in (0.25, 0.5, 1.0, 2.0)]
    assert sigmas_eps == sorted(sigmas_eps, reverse=True)
    sigmas_delta = [gaussian_sigma(1.0, d, 1.0) for d in (1e-10, 1e-8, 1e-6, 1e-4)]
    assert sigmas_delta == sorted(sigmas_delta, reverse=True)


def test_gaussian_sigma_domain_errors():
    with pytest.raises(DomainError):
        gaussian_sigma(0.0, 1e-8, 1.0)
    with pytest.raises(DomainError):
        gaussian_sigma(1.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        gaussian_sigma(1.0, 1.5, 1.0)
    with pytest.raises(DomainError):
        gaussian_sigma(1.0, 1e-8, -1.0)


def test_sensitivities_are_l2():
    assert count_sensitivity(4) == pytest.approx(2.0)
    assert sum_sensitivity(10.0, 4) == pytest.approx(20.0)


def test_add_central_noise_zero_sigma_is_identity():
    hist = {"a": (10.0, 3), "b": (5.0, 2)}
    out = add_central_noise(hist, GaussianParams.zero(), GaussianParams.zero(),
                            rand.generator(0, "t"))
    assert out.entries == {"a": (10.0, 3.0), "b": (5.0, 2.0)}


def test_add_central_noise_statistics():
    # empirical mean within 3*sigma/sqrt(n) of zero; std within 5% of sigma
    sigma = 7.0
    n = 100_000
    params = GaussianParams(sigma, 1.0, 1.0, 1e-8)
    hist = {str(i): (0.0, 0) for i in range(n)}
    out = add_central_noise(hist, params, params, rand.generator(7, "mc"))
    sums = np.array([v[0] for v in out.entries.values()])
    assert abs(sums.mean()) < 3 * sigma / math.sqrt(n)
    assert abs(sums.std() - sigma) < 0.05 * sigma


def test_add_central_noise_deterministic_under_seed():
    hist = {"a": (10.0, 3), "b": (5.0, 2)}
    params = GaussianParams.calibrate(1.0, 1e-8, 1.0)
    one = add_central_noise(hist, params, params, rand.generator(3, "x"))
    two = add_central_noise(hist, params, params, rand.generator(3, "x"))
    assert one.entries == two.entries


def test_add_central_noise_covers_declared_domain():
    params = GaussianParams.calibrate(1.0, 1e-8, 1.0)
    out = add_central_noise({}, params, params, rand.generator(1, "d"), domain=["a", "b", "c"])
    assert set(out.entries) == {"a", "b", "c"}
    assert all(v[0] != 0.0 for v in out.entries.values())


# ---------------------------------------------------------------------------
# Local DP


def test_ldp_keep_probability_zero_epsilon_two_buckets():
    assert LdpParams(0.0, 2).p_keep == pytest.approx(0.5)


def test_ldp_keep_probability_ln3():
    # e^ln3 / (e^ln3 + 1) = 3/4, by hand
    assert LdpParams(math.log(3.0), 2).p_keep == pytest.approx(0.75)


def test_ldp_channel_identity():
    params = LdpParams(1.0, 5)
    assert params.p_keep + 4 * params.p_other == pytest.approx(1.0)
    assert params.p_keep / params.p_other == pytest.approx(math.e)


def test_ldp_perturb_empirical_distribution():
    params = LdpParams(1.0, 4)
    rng = rand.generator(11, "chi2")
    trials = 100_000
    observed = np.zeros(4)
    for _ in range(trials):
        observed[ldp_perturb(2, params, rng)] += 1
    expected = np.full(4, params.p_other * trials)
    expected[2] = params.p_keep * trials
    chi2 = stats.chisquare(observed, expected)
    assert chi2.pvalue > 0.01


def test_ldp_debias_identity_channel_limit():
    # epsilon -> infinity keeps reports untouched, so debias returns raw
    params = LdpParams(50.0, 4)
    raw = [10, 0, 5, 3]
    estimates = ldp_debias(raw, sum(raw), params)
    assert estimates == pytest.approx(raw, abs=1e-6)


def test_ldp_debias_sum_identity_exact():
    params = LdpParams(1.0, 7)
    raw = [13, 0, 99, 4, 2, 61, 20]
    n = sum(raw)
    exact = ldp_debias_exact(raw, n, params)
    assert sum(exact) == Fraction(n)


def test_ldp_debias_inverts_channel_matrix_exactly():
    # debias(M @ c) == c for the exact rational transition matrix M
    params = LdpParams(1.0, 3)
    p, q = Fraction(params.p_keep), Fraction(params.p_other)
    c = [Fraction(5), Fraction(7), Fraction(11)]
    n = int(sum(c))
    observed = [
        p * c[j] + q * (sum(c) - c[j])
        for j in range(3)
    ]
    denom = p - q
    estimates = [(obs - n * q) / denom for obs in observed]
    assert estimates == c


def test_ldp_debias_unbiased_monte_carlo():
    params = LdpParams(1.0, 5)
    true_counts = np.array([400, 100, 0, 300, 200])
    n = int(true_counts.sum())
    rng = rand.generator(5, "unbiased")
    trials = 1000
    acc = np.zeros(5)
    for _ in range(trials):
        raw = np.zeros(5, dtype=int)
        for j, cnt in enumerate(true_counts):
            keep = rng.random(cnt) < params.p_keep
            raw[j] += keep.sum()
            others = rng.integers(0, 4, (~keep).sum())
            others = np.where(others < j, others, others + 1)
            np.add.at(raw, others, 1)
        acc += ldp_debias(list(raw), n, params)
    mean_est = acc / trials
    # 99% CI on the mean of `trials` runs
    per_run_sigma = math.sqrt(n * params.p_other) / (params.p_keep - params.p_other)
    ci = 2.58 * per_run_sigma / math.sqrt(trials)
    assert np.all(np.abs(mean_est - true_counts) < ci + 1.0)


def test_ldp_debias_degenerate_at_zero_epsilon():
    with pytest.raises(DegenerateError):
        ldp_debias([1, 1], 2, LdpParams(0.0, 2))


def test_ldp_perturb_index_out_of_range():
    with pytest.raises(DomainError):
        ldp_perturb(5, LdpParams(1.0, 5), rand.generator(0, "x"))


# ---------------------------------------------------------------------------
# Sample-and-threshold participation


def test_st_participation_extremes():
    assert st_participation(1, "q", 1.0, seed=0) is True
    assert st_participation(1, "q", 0.0, seed=0) is False


def test_st_participation_stable_per_client_query():
    draws = {st_participation(42, "q1", 0.5, seed=9) for _ in range(10)}
    assert len(draws) == 1


def test_st_participation_binomial_concentration():
    p = 0.3
    n = 100_000
    hits = sum(st_participation(cid, "q", p, seed=13) for cid in range(n))
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(hits / n - p) < 3 * sigma


# ---------------------------------------------------------------------------
# Budget


def test_split_budget_linear():
    budget = PrivacyBudget(1.0, 1e-8, 4)
    eps, delta = split_budget(budget)
    assert eps == pytest.approx(0.25)
    assert delta == pytest.approx(2.5e-9)


def test_split_budget_single_release_full_budget():
    budget = PrivacyBudget(2.0, 1e-8, 1)
    assert split_budget(budget) == (2.0, 1e-8)
    assert budget.exhausted


def test_split_budget_exhaustion():
    budget = PrivacyBudget(1.0, 1e-8, 3)
    spent = [split_budget(budget) for _ in range(3)]
    assert sum(e for e, _ in spent) <= 1.0 + 1e-12
    with pytest.raises(BudgetExhausted):
        split_budget(budget)


def test_budget_conservation_exact():
    budget = PrivacyBudget(1.0, 1e-8, 8)
    total = Fraction(0)
    for _ in range(8):
        eps, _ = split_budget(budget)
        total += Fraction(eps)
    assert total <= Fraction(1.0) + Fraction(8, 10**18)


# ---------------------------------------------------------------------------
# k-anonymity filter


def test_k_anon_drops_below_threshold():
    noised = NoisedHistogram({"a": (10.0, 4.2), "b": (20.0, 5.0)})
    out = k_anon_filter(noised, 5)
    assert set(out.entries) == {"b"}


def test_k_anon_zero_is_identity():
    noised = NoisedHistogram({"a": (10.0, -3.0), "b": (20.0, 0.5)})
    assert k_anon_filter(noised, 0).entries == noised.entries


def test_k_anon_postcondition_property():
    rng = rand.generator(21, "kanon")
    for _ in range(50):
        entries = {
            str(i): (float(rng.normal(0, 10)), float(rng.normal(5, 10))) for i in range(40)
        }
        k = int(rng.integers(0, 12))
        out = k_anon_filter(NoisedHistogram(entries), k)
        if k > 0:
            assert all(c >= k for _s, c in out.entries.values())
        surviving = {key for key, (_s, c) in entries.items() if c >= k}
        if k > 0:
            assert set(out.entries) == surviving
