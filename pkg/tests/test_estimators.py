import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualid.estimators import (
    ALL_KINDS, EstimatorKind, EstimatorReport, EstimatorSpec, Regression, affine_invariant_distance_sq,
    bregman_divergence, build_regression, dual_metric_objective, empty_regression, fit, fit_dual_metric,
    fit_energy, fit_ols, fit_regularized, fit_wls, pullback_hessian, residual_covariance,
)
from dualid.evaluate import identifiable_projection
from dualid.experiments import _seeds, consistency_margin, generate, perturbed_nominal, profile_config
from dualid.mechanisms import PanTilt, TwoLinkArm
from dualid.model import Dataset, LmiBlock, ModelError
from helpers import make_reg, noiseless, random_reg, trajectory


@pytest.fixture(scope="module")
def arm_run():
    cfg = profile_config("inertia-low", 3)
    gen = generate(cfg)
    reg = build_regression(gen.mechanism, gen.train)
    nominal = perturbed_nominal(gen.mechanism, reg, cfg.nominal_spread, _seeds(3)["nominal"])
    return gen.mechanism, reg, nominal


@pytest.fixture(scope="module")
def pantilt_noisy():
    gen = generate(profile_config("invariance", 1))
    return build_regression(gen.mechanism, gen.train)


# --- OLS ----------------------------------------------------------------------------


def test_ols_single_sample_identity():
    rep = fit_ols(make_reg([np.eye(2)], [[1.0, 2.0]]), enforce_consistency=False)
    np.testing.assert_allclose(rep.pi_hat.values, [1.0, 2.0], atol=1e-14)


def test_ols_noiseless_pantilt_recovers_truth():
    mech = PanTilt(gravity=True)
    rep = fit_ols(noiseless(mech))
    np.testing.assert_allclose(rep.pi_hat.values, mech.ground_truth.values, rtol=0, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_ols_matches_qr_oracle(seed):
    reg, _ = random_reg(seed, N=40, n=3, d=5)
    Q, R = np.linalg.qr(reg.A)
    oracle = np.linalg.solve(R, Q.T @ reg.b)
    np.testing.assert_allclose(fit_ols(reg, enforce_consistency=False).pi_hat.values, oracle, atol=1e-10)


def test_ols_constrained_inactive_matches_normal_equations():
    mech = PanTilt(gravity=True)
    reg = noiseless(mech)
    tau = reg.tau + 1e-3 * np.random.default_rng(0).standard_normal(reg.tau.shape)
    reg = dataclasses.replace(reg, tau=tau, rank=-1)
    normal = np.linalg.solve(reg.A.T @ reg.A, reg.A.T @ reg.b)
    np.testing.assert_allclose(fit_ols(reg).pi_hat.values, normal, rtol=1e-7)


def test_ols_rank_deficient_flags_minimum_norm():
    reg = make_reg([[[1.0, 1.0]]], [[2.0]])
    rep = fit_ols(reg, enforce_consistency=False)
    np.testing.assert_allclose(rep.pi_hat.values, [1.0, 1.0], atol=1e-12)
    assert any("minimum-norm" in f for f in rep.flags)


# --- WLS ----------------------------------------------------------------------------


def test_wls_identity_weight_is_ols():
    reg, _ = random_reg(7)
    a = fit_ols(reg, enforce_consistency=False).pi_hat.values
    b = fit_wls(reg, weight=np.eye(2), enforce_consistency=False).pi_hat.values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_wls_heavy_weight_tracks_first_coordinate():
    # one parameter, two conflicting readings: 1 on coordinate 0, 2 on coordinate 1
    reg = make_reg([[[1.0], [1.0]]], [[1.0, 2.0]])
    rep = fit_wls(reg, weight=np.diag([1e6, 1.0]), enforce_consistency=False)
    assert abs(rep.pi_hat.values[0] - (1e6 + 2.0) / (1e6 + 1.0)) < 1e-12
    assert abs(rep.pi_hat.values[0] - 1.0) < 2e-6


def test_wls_rejects_bad_weights():
    reg, _ = random_reg(0)
    with pytest.raises(ModelError):
        fit_wls(reg, weight=np.diag([1.0, -1.0]))
    with pytest.raises(ModelError):
        fit_wls(reg, weight="nope")


def test_auto_wls_beats_ols_on_anisotropic_noise():
    err = {"OLS": 0.0, "WLS": 0.0}
    for seed in range(50):
        reg, pi = random_reg(seed, N=40, stds=(0.01, 1.0))
        err["OLS"] += np.sum((fit_ols(reg, enforce_consistency=False).pi_hat.values - pi) ** 2)
        err["WLS"] += np.sum((fit_wls(reg, enforce_consistency=False).pi_hat.values - pi) ** 2)
    assert err["WLS"] <= err["OLS"]


def test_residual_covariance_matches_definition():
    reg, _ = random_reg(4)
    pi = fit_ols(reg, enforce_consistency=False).pi_hat.values
    r = reg.residuals(pi)
    S = r.T @ r / reg.N
    np.testing.assert_allclose(residual_covariance(reg), S + 1e-10 * np.trace(S) / 2 * np.eye(2), rtol=1e-12)


# --- energy -------------------------------------------------------------------------


def test_energy_zero_velocity_is_flagged():
    reg, _ = random_reg(0)
    reg = dataclasses.replace(reg, qd=np.zeros_like(reg.qd), rank=-1)
    rep = fit_energy(reg, enforce_consistency=False)
    assert rep.rank == 0 and any("rank 0" in f for f in rep.flags)
    assert rep.objective == 0.0


def test_energy_scalar_case_is_velocity_weighted_ols():
    rng = np.random.default_rng(2)
    Y = rng.standard_normal((25, 1, 2))
    tau = rng.standard_normal((25, 1))
    qd = rng.standard_normal((25, 1))
    reg = make_reg(Y, tau, qd=qd)
    rep = fit_energy(reg, enforce_consistency=False)
    w = qd[:, 0]
    oracle = np.linalg.lstsq(w[:, None] * Y[:, 0], w * tau[:, 0], rcond=None)[0]
    np.testing.assert_allclose(rep.pi_hat.values, oracle, atol=1e-12)


@pytest.mark.parametrize("gravity", [False, True])
def test_energy_rank_matches_svd(gravity):
    mech = PanTilt(gravity=gravity)
    reg = noiseless(mech)
    rows = np.einsum("ni,nid->nd", reg.qd, reg.Y)
    rep = fit_energy(reg, enforce_consistency=False)
    assert rep.rank == np.linalg.matrix_rank(rows)


def test_energy_rank_deficiency_detected():
    # velocity orthogonal to the second regressor column: that column never enters the scalar rows
    rng = np.random.default_rng(0)
    Y = np.zeros((10, 2, 2))
    Y[:, 0, 0] = rng.standard_normal(10)
    Y[:, 1, 1] = rng.standard_normal(10)
    qd = np.column_stack([rng.standard_normal(10), np.zeros(10)])
    rep = fit_energy(make_reg(Y, rng.standard_normal((10, 2)), qd=qd), enforce_consistency=False)
    assert rep.rank == 1 == np.linalg.matrix_rank(np.einsum("ni,nid->nd", qd, Y))
    assert any("rank 1 < 2" in f for f in rep.flags)


# --- dual metric --------------------------------------------------------------------


def test_dual_metric_with_identity_metric_is_ols():
    reg, _ = random_reg(5)
    a = fit_ols(reg, enforce_consistency=False).pi_hat.values
    rep = fit_dual_metric(reg, enforce_consistency=False)
    assert rep.ok
    np.testing.assert_allclose(rep.pi_hat.values, a, atol=1e-7)
    ols = fit_ols(reg, enforce_consistency=False).objective
    assert abs(rep.objective - ols) <= 1e-8 * ols


def test_dual_metric_noiseless_pantilt_recovers_truth():
    mech = PanTilt(gravity=True)
    rep = fit_dual_metric(noiseless(mech))
    np.testing.assert_allclose(rep.pi_hat.values, mech.ground_truth.values, rtol=1e-6)


def test_dual_metric_one_parameter_grid_oracle():
    # M_i(pi) = M0_i + pi Mp_i, Y_i = Mp_i qd_i: a one-parameter drag-like system
    rng = np.random.default_rng(11)
    N, n = 3, 2
    M0 = np.array([np.diag(rng.uniform(0.1, 0.5, n)) for _ in range(N)])
    Mp = np.zeros((N, 1, n, n))
    for i in range(N):
        B = rng.standard_normal((n, n))
        Mp[i, 0] = B @ B.T + 0.2 * np.eye(n)
    qd = rng.standard_normal((N, n))
    Y = np.einsum("nij,nj->ni", Mp[:, 0], qd)[:, :, None]
    tau = np.einsum("nij,nj->ni", M0 + 1.3 * Mp[:, 0], qd) - np.einsum("nij,nj->ni", M0, qd)
    tau += 0.5 * rng.standard_normal((N, n))
    reg = make_reg(Y, tau, qd=qd, M0=M0, Mp=Mp)
    rep = fit_dual_metric(reg, enforce_consistency=False)
    grid = np.arange(1e-4, 6.0, 1e-4)
    vals = [dual_metric_objective(reg, [p]).sum() for p in grid]
    assert abs(rep.pi_hat.values[0] - grid[int(np.argmin(vals))]) < 1e-3
    assert rep.objective <= min(vals) + 1e-8


def test_dual_metric_needs_data():
    with pytest.raises(ModelError):
        fit_dual_metric(empty_regression(PanTilt()))


def test_dual_metric_slacks_are_tight(pantilt_noisy):
    rep = fit_dual_metric(pantilt_noisy)
    np.testing.assert_allclose(rep.slacks, rep.per_sample_weighted_residuals, rtol=1e-6, atol=1e-9)


# --- regularized --------------------------------------------------------------------


def test_tiny_rho_matches_wls(arm_run):
    _, reg, nominal = arm_run
    # the arm regression has a nullspace; only the identifiable part is pinned down by the data
    P = identifiable_projection(reg)
    wls = P @ fit_wls(reg).pi_hat.values
    for kind in ("RegPullback", "RegBregman"):
        rep = fit_regularized(reg, kind, nominal, rho=1e-12)
        np.testing.assert_allclose(P @ rep.pi_hat.values, wls, rtol=0, atol=1e-6 * np.max(np.abs(wls)))


def test_pullback_without_data_returns_nominal(arm_run):
    mech, _, nominal = arm_run
    rep = fit_regularized(empty_regression(mech), "RegPullback", nominal, rho=1.0)
    np.testing.assert_allclose(rep.pi_hat.values, nominal, rtol=1e-7)


def _two_param_toy(seed=0):
    rng = np.random.default_rng(seed)
    N = 20
    Y = rng.standard_normal((N, 2, 2))
    tau = Y @ np.array([0.7, 1.9]) + rng.standard_normal((N, 2)) * [0.1, 0.3]
    prior = (LmiBlock(np.zeros((1, 1)), np.array([[[1.0]], [[0.0]]]), "p0 >= 0"),
             LmiBlock(np.zeros((1, 1)), np.array([[[0.0]], [[1.0]]]), "p1 >= 0"))
    return make_reg(Y, tau, prior=prior)


def test_pullback_closed_form_two_parameters():
    reg = _two_param_toy()
    pi0, rho = np.array([0.5, 2.5]), 3.0
    rep = fit_regularized(reg, "RegPullback", pi0, rho=rho, enforce_consistency=False)
    W = np.linalg.inv(residual_covariance(reg))
    H = pullback_hessian(reg.prior_blocks, pi0)
    lhs = np.einsum("nid,ij,nje->de", reg.Y, W, reg.Y) + rho * H
    rhs = np.einsum("nid,ij,nj->d", reg.Y, W, reg.tau) + rho * H @ pi0
    np.testing.assert_allclose(rep.pi_hat.values, np.linalg.solve(lhs, rhs), atol=1e-9)


def test_pullback_hessian_scalar_blocks():
    # d(p, p0)^2 = log(p / p0)^2 has second derivative 2 / p0^2 at p0
    reg = _two_param_toy()
    H = pullback_hessian(reg.prior_blocks, [0.5, 2.5])
    np.testing.assert_allclose(H, np.diag([2 / 0.25, 2 / 6.25]), rtol=1e-6, atol=1e-8)


def test_pullback_hessian_matches_trace_form(arm_run):
    # analytic Hessian of the affine-invariant distance: 2 tr(P0^-1 Fp P0^-1 Fq)
    _, reg, nominal = arm_run
    H = pullback_hessian(reg.prior_blocks, nominal)
    exact = np.zeros_like(H)
    for blk in reg.prior_blocks:
        Pi = np.linalg.inv(blk.evaluate(nominal))
        G = np.einsum("ij,pjk->pik", Pi, blk.F)
        exact += 2 * np.einsum("pij,qji->pq", G, G)
    np.testing.assert_allclose(H, exact, rtol=1e-5, atol=1e-6 * np.max(np.abs(exact)))


def test_pullback_penalty_nonincreasing_in_rho(arm_run):
    _, reg, nominal = arm_run
    H = pullback_hessian(reg.prior_blocks, nominal)
    g = []
    for rho in np.logspace(-4, 4, 9):
        x = fit_regularized(reg, "RegPullback", nominal, rho=rho).pi_hat.values
        g.append((x - nominal) @ H @ (x - nominal))
    assert all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(g, g[1:])), g


def test_bregman_divergence_properties(arm_run):
    _, reg, nominal = arm_run
    blocks = reg.prior_blocks
    assert abs(bregman_divergence(blocks, nominal, nominal)) < 1e-10
    assert bregman_divergence(blocks, 1.1 * nominal, nominal) > 0
    assert bregman_divergence(blocks, -nominal, nominal) == np.inf
    assert affine_invariant_distance_sq(blocks, -nominal, nominal) == np.inf


def test_regularized_argument_errors(arm_run):
    mech, reg, nominal = arm_run
    with pytest.raises(ModelError):
        EstimatorSpec("RegBregman")
    with pytest.raises(ModelError):
        EstimatorSpec("RegPullback", nominal=nominal, rho=0.0)
    with pytest.raises(ModelError):
        fit_regularized(reg, "RegPullback", -nominal)
    with pytest.raises(ModelError):
        fit_regularized(reg, "OLS", nominal)


# --- shared properties --------------------------------------------------------------


def test_every_estimator_is_consistency_feasible(arm_run):
    _, reg, nominal = arm_run
    for kind in ALL_KINDS:
        rep = fit(reg, EstimatorSpec(kind, nominal=nominal))
        for con in reg.constraints:
            assert con.check(rep.pi_hat.values)["feasible"], (kind, con.name)


def test_crawler_estimators_are_consistency_feasible():
    gen = generate(profile_config("drag-low", 2))
    mech = gen.mechanism
    reg = build_regression(mech, gen.train)
    nominal = perturbed_nominal(mech, reg, 0.3, _seeds(2)["nominal"])
    for kind in ALL_KINDS:
        rep = fit(reg, EstimatorSpec(kind, nominal=nominal))
        assert all(c.check(rep.pi_hat.values)["feasible"] for c in reg.constraints), kind


def negative_mass_arm():
    mech = TwoLinkArm()
    ds = trajectory(mech)
    bad = mech.ground_truth.values.copy()
    bad[4], bad[7] = -0.5, -0.1  # link-2 mass and inertia
    tau = mech.inverse_dynamics(ds.q, ds.qd, ds.qdd, bad)
    return mech, build_regression(mech, dataclasses.replace(ds, tau=tau))


def test_noiseless_weighted_fits_are_well_scaled():
    # the auto covariance is at round-off level here; the fits must still solve
    mech, reg = negative_mass_arm()
    for kind in ALL_KINDS:
        rep = fit(reg, EstimatorSpec(kind, nominal=mech.ground_truth.values))
        assert rep.ok, kind
        assert consistency_margin(reg, rep.pi_hat.values) >= -1e-8, kind


def test_adversarial_data_ends_on_the_boundary():
    _, reg = negative_mass_arm()
    assert consistency_margin(reg, fit_ols(reg, enforce_consistency=False).pi_hat.values) < -0.1
    for kind in ("OLS", "WLS", "EnergyLS"):
        m = consistency_margin(reg, fit(reg, EstimatorSpec(kind)).pi_hat.values)
        assert -1e-8 <= m <= 1e-4, kind


def test_dual_metric_invariance_under_chart_maps(pantilt_noisy):
    reg = pantilt_noisy
    base = fit_dual_metric(reg)
    rng = np.random.default_rng(0)
    for D in [np.diag([1000.0, 1.0]), rng.standard_normal((2, 2)) + 2 * np.eye(2)]:
        rep = fit_dual_metric(reg.transformed(D))
        np.testing.assert_allclose(rep.pi_hat.values, base.pi_hat.values, rtol=1e-6)
        assert abs(rep.objective - base.objective) <= 1e-8 * abs(base.objective)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(-3, 3))
def test_per_sample_objective_is_chart_invariant(seed, scale):
    reg = noiseless(PanTilt(gravity=True), seed=0, count=1).subset(np.arange(10))
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((2, 2)) * 10**scale
    if np.linalg.cond(D) > 1e6:
        return
    pi = np.array([0.05, 0.2]) * rng.uniform(0.5, 2, 2)
    reg = dataclasses.replace(reg, tau=reg.tau + rng.standard_normal(reg.tau.shape), rank=-1)
    a = dual_metric_objective(reg, pi)
    b = dual_metric_objective(reg.transformed(D), pi)
    np.testing.assert_allclose(b, a, rtol=1e-8)


def test_ols_depends_on_chart(pantilt_noisy):
    reg = pantilt_noisy
    a = fit_ols(reg).pi_hat.values
    b = fit_ols(reg.transformed(np.diag([1000.0, 1.0]))).pi_hat.values
    assert np.linalg.norm(b - a) / np.linalg.norm(a) > 1e-2


def test_nullspace_agreement_on_arm():
    mech = TwoLinkArm()
    reg = noiseless(mech, seed=4, count=3)
    assert reg.rank < reg.d
    _, s, Vt = np.linalg.svd(reg.A)
    V = Vt[reg.rank:].T
    P = np.eye(reg.d) - V @ V.T
    a = fit_ols(reg, enforce_consistency=False).pi_hat.values
    b = fit_dual_metric(reg).pi_hat.values
    np.testing.assert_allclose(P @ b, P @ a, atol=1e-6 * np.max(np.abs(P @ a)))
    np.testing.assert_allclose(P @ a, P @ mech.ground_truth.values, atol=1e-8)


def test_singular_samples_dropped_for_all():
    mech = PanTilt()
    q = np.array([[0.1, 0.2], [0.3, np.pi / 2], [0.0, -0.4], [0.2, 0.1]])
    rng = np.random.default_rng(0)
    qd, qdd = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    tau = mech.inverse_dynamics(q, qd, qdd, mech.ground_truth.values)
    reg = build_regression(mech, Dataset(t=0.01 * np.arange(4), q=q, qd=qd, qdd=qdd, tau=tau))
    assert reg.excluded == (1,) and reg.N == 3
    for kind in ("OLS", "WLS", "EnergyLS", "DualMetric"):
        assert len(fit(reg, EstimatorSpec(kind)).per_sample_weighted_residuals) == 3


def test_report_round_trip(arm_run):
    _, reg, nominal = arm_run
    rep = fit(reg, EstimatorSpec("RegBregman", nominal=nominal))
    back = EstimatorReport.from_dict(rep.to_dict())
    np.testing.assert_array_equal(back.pi_hat.values, rep.pi_hat.values)
    assert back.rho == rep.rho and back.flags == rep.flags and back.solver == rep.solver
