import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from ngmm.lmm import (EventSummary, LMMError, VarianceComponents, condition_random_effects,
                      conditional_between_var, fit_mle, loglik, shrinkage, summarize_events)


def dense_loglik(groups, tau2, phi2):
    total = 0.0
    for x in groups:
        n = len(x)
        C = tau2 * np.ones((n, n)) + phi2 * np.eye(n)
        total += multivariate_normal(np.zeros(n), C).logpdf(x)
    return total


def _groups(rng, sizes):
    return [rng.normal(0, 0.3, n) + rng.normal(0, 0.2) for n in sizes]


def _summ(groups):
    ev = np.concatenate([np.full(len(g), i) for i, g in enumerate(groups)])
    return summarize_events(ev, np.concatenate(groups))


def test_closed_form_matches_dense_density():
    rng = np.random.default_rng(0)
    g = _groups(rng, [1, 3, 7, 10])
    assert loglik(_summ(g), 0.05, 0.07) == pytest.approx(dense_loglik(g, 0.05, 0.07), rel=1e-12)


def test_single_event_single_record_is_univariate_normal():
    s = [EventSummary("e", 1, 0.4, 0.0)]
    expect = -0.5 * (np.log(2 * np.pi * 0.3) + 0.16 / 0.3)
    assert loglik(s, 0.1, 0.2) == pytest.approx(expect, rel=1e-14)


def test_tau_zero_is_iid_normal():
    rng = np.random.default_rng(1)
    g = _groups(rng, [4, 5])
    x = np.concatenate(g)
    expect = np.sum(-0.5 * (np.log(2 * np.pi * 0.09) + x**2 / 0.09))
    assert loglik(_summ(g), 0.0, 0.09) == pytest.approx(expect, rel=1e-12)


def test_invalid_variances():
    s = [EventSummary("e", 2, 0.0, 0.1)]
    with pytest.raises(LMMError):
        loglik(s, 0.1, 0.0)
    with pytest.raises(LMMError):
        loglik(s, -0.1, 0.1)


def test_all_singletons_not_identifiable():
    s = [EventSummary(i, 1, 0.1 * i, 0.0) for i in range(5)]
    with pytest.raises(LMMError, match="singleton"):
        fit_mle(s)


def test_too_few_events():
    with pytest.raises(LMMError):
        fit_mle([EventSummary(0, 4, 0.1, 0.2)])


def test_fit_is_a_maximum_and_order_invariant():
    rng = np.random.default_rng(2)
    g = [rng.normal(0, np.sqrt(0.0663), 20) + rng.normal(0, np.sqrt(0.0553)) for _ in range(60)]
    s = _summ(g)
    vc, rep = fit_mle(s)
    assert rep.converged and rep.grad_norm < 1e-5
    best = loglik(s, vc.tau_ddot2, vc.phi_ddot2)
    for dt, dp in [(1.01, 1), (0.99, 1), (1, 1.01), (1, 0.99)]:
        assert loglik(s, vc.tau_ddot2 * dt, vc.phi_ddot2 * dp) <= best
    vc2, _ = fit_mle(s.to_list()[::-1])
    assert vc2.tau_ddot2 == vc.tau_ddot2 and vc2.phi_ddot2 == vc.phi_ddot2


def test_fit_pins_tau_at_floor_without_between_variance():
    rng = np.random.default_rng(3)
    g = [rng.normal(0, 0.3, 5) for _ in range(300)]
    vc, rep = fit_mle(_summ(g))
    assert vc.tau_ddot2 < 2e-3
    assert vc.phi_ddot2 == pytest.approx(0.09, rel=0.1)


def test_shrinkage_limits():
    assert shrinkage(0, 0.05, 0.07) == 0.0
    assert shrinkage(1e9, 0.05, 0.07) == pytest.approx(1.0)
    comp = VarianceComponents(0.05, 0.07)
    assert conditional_between_var(0, comp) == pytest.approx(0.05)
    assert conditional_between_var(10, comp) < 0.05 * 0.07 / (0.07 + 0.5) + 1e-12


def test_condition_random_effects_matches_dense_gaussian():
    x = np.array([0.3, 0.5])
    tau2, phi2 = 0.05, 0.07
    C = tau2 * np.ones((2, 2)) + phi2 * np.eye(2)
    expect = tau2 * np.ones(2) @ np.linalg.solve(C, x)
    b = condition_random_effects(summarize_events(np.array(["e", "e"]), x), VarianceComponents(tau2, phi2))
    assert b["e"] == pytest.approx(expect, rel=1e-12)


def test_negative_components_rejected():
    with pytest.raises(LMMError):
        VarianceComponents(-0.1, 0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 10), min_size=1, max_size=8), st.floats(0.0, 0.5), st.floats(0.01, 0.5),
       st.integers(0, 10_000))
def test_closed_form_property(sizes, tau2, phi2, seed):
    rng = np.random.default_rng(seed)
    g = _groups(rng, sizes)
    a, b = loglik(_summ(g), tau2, phi2), dense_loglik(g, tau2, phi2)
    assert abs(a - b) <= 1e-10 * abs(b)
