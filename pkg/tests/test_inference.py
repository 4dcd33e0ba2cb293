import numpy as np
import pytest

from ngmm.domain import collapse_to_means, split
from ngmm.inference import (StaleFactorError, build_factor, evaluate_groups, interpolate, predict)
from ngmm.kernels import PointSet, assemble_train_cov, kernel_matrix, prior_diag
from ngmm.synth import SynthSpec, generate


@pytest.fixture(scope="module")
def world(ngmm1):
    res = generate(SynthSpec(n_sites=30, n_scenarios=25, variations=(3, 6), params=ngmm1, seed=11))
    cat = res.catalog
    assign = split(cat.sites, cat.scenarios, 0.2, 0.2, seed=1)
    labels = assign.catalog_labels(cat)
    obs_cat = cat.subset(labels == "TrTr")
    return res, assign, labels, obs_cat, collapse_to_means(obs_cat)


def record_points(cat, sel):
    return PointSet(cat.site_xy[cat.rec_site[sel]], cat.scenario_xy[cat.rec_scenario[sel]], cat.rec_scenario[sel])


def dense_oracle(obs, pts, p):
    A = assemble_train_cov(obs.points(), p.kernel, p.tau_dot2, p.phi_dot2)
    K = kernel_matrix(pts, obs.points(), p.kernel)
    mean = K @ np.linalg.solve(A, obs.y_bar)
    kv = prior_diag(pts, p.kernel) - np.einsum("ij,ji->i", K, np.linalg.solve(A, K.T))
    return mean, kv


@pytest.mark.parametrize("structure", ["latent", "plain"])
def test_saturated_factor_matches_dense(world, ngmm1, structure):
    res, _, labels, _, obs = world
    cat = res.catalog
    pts = record_points(cat, labels == "TeTr")
    m0, kv0 = dense_oracle(obs, pts, ngmm1)
    f = build_factor(obs, ngmm1, rho=np.inf, structure=structure)
    r = predict(obs, pts, ngmm1, f)
    assert np.max(np.abs(r.mean - m0)) < 1e-7
    assert np.max(np.abs(r.kernel_var - kv0)) < 1e-7
    rd = predict(obs, pts, ngmm1, None)
    assert np.max(np.abs(rd.mean - m0)) < 1e-9


def test_latent_factor_is_close_at_moderate_rho(world, ngmm1):
    res, _, labels, _, obs = world
    pts = record_points(res.catalog, labels == "TeTe")
    m0, kv0 = dense_oracle(obs, pts, ngmm1)
    r = predict(obs, pts, ngmm1, build_factor(obs, ngmm1, rho=2.0))
    assert np.max(np.abs(r.mean - m0)) < 0.02
    assert np.max(np.abs(r.kernel_var - kv0)) < 0.01


def test_far_points_revert_to_prior(world, ngmm1):
    _, _, _, _, obs = world
    far = PointSet(np.full((3, 2), 1e5), np.full((3, 2), 2e5), np.array([999, 999, 1000]))
    r = predict(obs, far, ngmm1, build_factor(obs, ngmm1))
    assert np.allclose(r.mean, 0.0, atol=1e-12)
    assert np.allclose(r.kernel_var, ngmm1.site_var + ngmm1.path_var, rtol=1e-6)
    total = ngmm1.site_var + ngmm1.path_var + ngmm1.primary_var + ngmm1.secondary_var
    assert np.allclose(r.var, total, rtol=1e-6)


def test_stale_factor_rejected(world, ngmm1):
    _, _, _, _, obs = world
    f = build_factor(obs, ngmm1)
    with pytest.raises(StaleFactorError):
        predict(obs, obs.points(), ngmm1.replace(site_len=10.0), f)
    with pytest.raises(StaleFactorError):
        predict(obs.subset(np.arange(len(obs)) > 0), obs.points(), ngmm1, f)


def test_workers_do_not_change_results(world, ngmm1):
    res, _, labels, _, obs = world
    pts = record_points(res.catalog, labels != "TrTr")
    f = build_factor(obs, ngmm1)
    a = predict(obs, pts, ngmm1, f, workers=1)
    b = predict(obs, pts, ngmm1, f, workers=4)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def test_interpolation_beats_prediction_on_observed_variations(world, ngmm1):
    res, _, labels, obs_cat, obs = world
    cat = res.catalog
    sel = labels == "TrTe"
    pts = record_points(cat, sel)
    f = build_factor(obs, ngmm1)
    pv = cat.variation_ids[cat.rec_variation[sel]].tolist()
    pr = predict(obs, pts, ngmm1, f)
    ip = interpolate(obs_cat, pts, pv, ngmm1, f, obs_table=obs)
    assert ip.mode == "interpolation"
    rmse = lambda m: np.sqrt(np.mean((cat.y[sel] - m) ** 2))
    assert rmse(ip.mean) < rmse(pr.mean)
    assert np.all(ip.std < pr.std)


def test_interpolation_degrades_for_unknown_variations(world, ngmm1):
    res, _, labels, obs_cat, obs = world
    cat = res.catalog
    sel = np.flatnonzero(labels == "TrTe")[:20]
    pts = record_points(cat, sel)
    f = build_factor(obs, ngmm1)
    pv = cat.variation_ids[cat.rec_variation[sel]].tolist()
    pv[0], pv[1] = None, "not-a-variation"
    pr = predict(obs, pts, ngmm1, f)
    ip = interpolate(obs_cat, pts, pv, ngmm1, f, obs_table=obs)
    assert np.allclose(ip.mean[:2], pr.mean[:2]) and np.allclose(ip.std[:2], pr.std[:2])
    assert not np.allclose(ip.mean[2:], pr.mean[2:])
    with pytest.raises(ValueError):
        interpolate(obs_cat, pts, pv[:-1], ngmm1, f, obs_table=obs)


def test_prediction_covariance_diagonal_matches_variance(world, ngmm1):
    res, _, labels, _, obs = world
    pts = record_points(res.catalog, np.flatnonzero(labels == "TeTe")[:50])
    r = predict(obs, pts, ngmm1, None, dense_cov=True)
    assert np.allclose(np.diag(r.covariance), r.var, rtol=1e-8)
    np.linalg.cholesky(r.covariance + 1e-12 * np.eye(len(pts)))


def test_group_metrics(world, ngmm1):
    res, assign, labels, obs_cat, obs = world
    cat = res.catalog
    r = predict(obs, record_points(cat, np.ones(len(cat), bool)), ngmm1, build_factor(obs, ngmm1))
    ms = {m.group: m for m in evaluate_groups(cat, r.mean, r.std, assign)}
    assert set(ms) == {"TrTr", "TrTe", "TeTr", "TeTe"}
    assert all(m.present and m.n_records > 0 for m in ms.values())
    assert sum(m.n_records for m in ms.values()) == len(cat)
    assert ms["TrTr"].rmse_ybar < ms["TeTe"].rmse_ybar
    none = evaluate_groups(cat, r.mean, r.std, assign, mask=labels == "TrTr")
    assert [m.present for m in none] == [True, False, False, False]
    with pytest.raises(ValueError):
        evaluate_groups(cat, r.mean[:-1], r.std, assign)


def test_no_same_event_data_is_bit_identical_to_prediction(world, ngmm1):
    res, _, labels, obs_cat, obs = world
    cat = res.catalog
    sel = np.flatnonzero(labels == "TeTe")[:30]
    pts = record_points(cat, sel)
    f = build_factor(obs, ngmm1)
    pr = predict(obs, pts, ngmm1, f)
    ip = interpolate(obs_cat, pts, cat.variation_ids[cat.rec_variation[sel]].tolist(), ngmm1, f, obs_table=obs)
    assert np.array_equal(ip.mean, pr.mean) and np.array_equal(ip.std, pr.std)


def test_interpolation_shift_matches_dense_block_solve(ngmm1):
    from ngmm.domain import cell_deviations

    res = generate(SynthSpec(n_sites=2, n_scenarios=3, variations=2, params=ngmm1, seed=4))
    cat = res.catalog
    obs = collapse_to_means(cat)
    pts = PointSet(cat.site_xy[:1], cat.scenario_xy[:1], np.array([0]))
    dev = cell_deviations(cat, obs)
    t2, p2 = ngmm1.tau_ddot2, ngmm1.phi_ddot2
    for v, vid in enumerate(cat.variation_ids):
        m = cat.rec_variation == v
        C = t2 * np.ones((m.sum(), m.sum())) + p2 * np.eye(m.sum())
        dense = t2 * np.ones(m.sum()) @ np.linalg.solve(C, dev[m])
        ip = interpolate(cat, pts, [vid], ngmm1, None, obs_table=obs)
        pr = predict(obs, pts, ngmm1, None)
        assert ip.mean[0] - pr.mean[0] == pytest.approx(dense, abs=1e-10)
        rem = t2 - t2 * np.ones(m.sum()) @ np.linalg.solve(C, t2 * np.ones(m.sum()))
        assert ip.aleatory["tau_ddot2"][0] == pytest.approx(rem, abs=1e-12)


def test_posterior_kernel_variance_below_prior(world, ngmm1):
    res, _, labels, _, obs = world
    pts = record_points(res.catalog, labels != "TrTr")
    r = predict(obs, pts, ngmm1, build_factor(obs, ngmm1))
    assert np.all(r.kernel_var <= ngmm1.site_var + ngmm1.path_var + 1e-12)
    assert np.all(r.kernel_var >= 0)
