import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from dualid.mechanisms import DragCrawler3, PanTilt, TwoLinkArm, from_description
from dualid.model import (
    AffineMetric,
    Dataset,
    ModelError,
    Sample,
    SingularConfigurationError,
    build_affine_metric,
    build_regressor,
    consistency_constraints,
    dual_norm_sq,
    metric_sqrt,
    regressor_stack,
)


# --- independent Lagrangian oracle for the planar arm ----------------------


def _arm_oracle(arm):
    """Inverse dynamics from kinetic and potential energy by symbolic differentiation.

    The energies are written from point kinematics of each link frame; no
    coefficient matrices from the package are used.
    """
    q1, q2, dq1, dq2, ddq1, ddq2 = sp.symbols("q1 q2 dq1 dq2 ddq1 ddq2")
    m1, h1x, h1y, I1, m2, h2x, h2y, I2 = sp.symbols("m1 h1x h1y I1 m2 h2x h2y I2")
    t = sp.Symbol("t")
    Q1, Q2 = sp.Function("Q1")(t), sp.Function("Q2")(t)
    l1, g = arm.l1, arm.g

    def rot(a):
        return sp.Matrix([[sp.cos(a), -sp.sin(a)], [sp.sin(a), sp.cos(a)]])

    o2 = sp.Matrix([l1 * sp.cos(Q1), l1 * sp.sin(Q1)])
    w1, w2 = Q1.diff(t), Q1.diff(t) + Q2.diff(t)
    v2 = o2.diff(t)
    h2w = rot(Q1 + Q2) * sp.Matrix([h2x, h2y])
    # kinetic energy of a planar body: 1/2 m v.v + m v.(w x c) + 1/2 I_origin w^2
    wxh = sp.Matrix([-w2 * h2w[1], w2 * h2w[0]])
    T = sp.Rational(1, 2) * I1 * w1**2 + sp.Rational(1, 2) * m2 * (v2.T * v2)[0] + (v2.T * wxh)[0] \
        + sp.Rational(1, 2) * I2 * w2**2
    h1w = rot(Q1) * sp.Matrix([h1x, h1y])
    V = g * (h1w[1] + m2 * o2[1] + h2w[1])
    L = T - V
    subs = {Q1.diff(t, 2): ddq1, Q2.diff(t, 2): ddq2}
    subs2 = {Q1.diff(t): dq1, Q2.diff(t): dq2}
    subs3 = {Q1: q1, Q2: q2}
    taus = []
    for Q in (Q1, Q2):
        e = L.diff(Q.diff(t)).diff(t) - L.diff(Q)
        taus.append(e.subs(subs).subs(subs2).subs(subs3))
    args = (q1, q2, dq1, dq2, ddq1, ddq2, m1, h1x, h1y, I1, m2, h2x, h2y, I2)
    f = sp.lambdify(args, sp.Matrix(taus), "numpy")
    Tq = T.subs(subs2).subs(subs3)
    return f, sp.lambdify((q1, q2, dq1, dq2, m1, h1x, h1y, I1, m2, h2x, h2y, I2), Tq, "numpy")


@pytest.fixture(scope="module")
def arm_oracle():
    arm = TwoLinkArm()
    return arm, _arm_oracle(arm)


def test_arm_regressor_matches_lagrangian_oracle(arm_oracle):
    arm, (tau_fn, _) = arm_oracle
    rng = np.random.default_rng(3)
    for _ in range(20):
        q, qd, qdd = rng.normal(size=(3, 2))
        pi = arm.ground_truth.values * rng.uniform(0.5, 1.5, size=8)
        expected = np.asarray(tau_fn(*q, *qd, *qdd, *pi), dtype=float).reshape(-1)
        row = build_regressor(arm, Sample(0.0, q, qd, np.zeros(2), qdd))
        np.testing.assert_allclose(row.Y @ pi, expected, rtol=1e-9, atol=1e-9 * np.abs(expected).max())
        np.testing.assert_allclose(arm.inverse_dynamics(q, qd, qdd, pi)[0], expected, rtol=1e-9,
                                   atol=1e-9 * np.abs(expected).max())


def test_arm_metric_matches_kinetic_energy_hessian(arm_oracle):
    arm, (_, T_fn) = arm_oracle
    rng = np.random.default_rng(4)
    pi = arm.ground_truth.values
    for _ in range(10):
        q = rng.normal(size=2)
        h = 1e-3
        H = np.zeros((2, 2))
        T = lambda v: T_fn(*q, *v, *pi)
        for i in range(2):
            for j in range(2):
                ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
                H[i, j] = (T(ei + ej) - T(ei - ej) - T(-ei + ej) + T(-ei - ej)) / (4 * h * h)
        M = build_affine_metric(arm, q).assemble(pi)
        np.testing.assert_allclose(M, H, atol=1e-7)


# --- worked examples -------------------------------------------------------


def test_pan_tilt_identity_configuration():
    pt = PanTilt()
    row = build_regressor(pt, Sample(0.0, [0, 0], [0, 0], [0, 0], [1, 0]))
    np.testing.assert_array_equal(row.Y, [[1.0], [0.0]])
    np.testing.assert_array_equal(build_affine_metric(pt, [0, 0]).assemble([1.0]), np.eye(2))
    np.testing.assert_allclose(build_affine_metric(pt, [0, np.pi / 3]).assemble([1.0]), np.diag([0.25, 1.0]),
                               atol=1e-15)


def test_drag_regressor_vanishes_at_rest():
    cr = DragCrawler3()
    rng = np.random.default_rng(0)
    q = rng.normal(size=(5, 5))
    Y = regressor_stack(cr, q, np.zeros((5, 5)))
    assert np.all(Y == 0)


def test_regressor_errors():
    arm = TwoLinkArm()
    with pytest.raises(ModelError):
        build_regressor(arm, Sample(0.0, [0, 0], [0, 0], [0, 0]))
    with pytest.raises(ModelError):
        build_regressor(arm, Sample(0.0, [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0]))
    with pytest.raises(ModelError):
        build_affine_metric(arm, [0.0, 0.0, 0.0])


@pytest.mark.parametrize("mech", [PanTilt(), PanTilt(gravity=True), TwoLinkArm(), DragCrawler3()],
                         ids=lambda m: m.name)
def test_affine_and_direct_routes_agree(mech):
    rng = np.random.default_rng(1)
    q, qd, qdd = rng.normal(size=(3, 40, mech.n))
    q[:, -1] = np.clip(q[:, -1], -1.2, 1.2)
    for _ in range(3):
        pi = mech.ground_truth.values * rng.uniform(0.2, 2.0, size=mech.d)
        Y = mech.regressor(q, qd, qdd)
        tau = mech.inverse_dynamics(q, qd, qdd, pi)
        np.testing.assert_allclose(Y @ pi, tau, atol=1e-10 * max(1, np.abs(tau).max()))
        M0, Mp = mech.metric_terms(q)
        np.testing.assert_allclose(M0 + np.einsum("p,npij->nij", pi, Mp), mech.metric(q, pi), atol=1e-12)


@pytest.mark.parametrize("mech", [PanTilt(), TwoLinkArm()], ids=lambda m: m.name)
def test_metric_is_acceleration_block_of_regressor(mech):
    rng = np.random.default_rng(2)
    q, qdd = rng.normal(size=(2, 10, mech.n))
    Y = mech.regressor(q, np.zeros_like(q), qdd) - mech.regressor(q, np.zeros_like(q), np.zeros_like(q))
    _, Mp = mech.metric_terms(q)
    np.testing.assert_allclose(Y, np.einsum("npij,nj->nip", Mp, qdd), atol=1e-9)


def test_regressor_is_deterministic_and_linear():
    arm = TwoLinkArm()
    rng = np.random.default_rng(5)
    q, qd, qdd = rng.normal(size=(3, 6, 2))
    Y1, Y2 = arm.regressor(q, qd, qdd), arm.regressor(q, qd, qdd)
    assert np.array_equal(Y1, Y2)
    p1, p2 = rng.normal(size=(2, 8))
    np.testing.assert_allclose(Y1 @ (2.5 * p1 + p2), 2.5 * (Y1 @ p1) + Y1 @ p2, atol=1e-12)


def test_drag_power_pairing():
    cr = DragCrawler3()
    rng = np.random.default_rng(6)
    q, qd = rng.normal(size=(2, 200, 5))
    tau = cr.inverse_dynamics(q, qd, None, cr.ground_truth.values)
    power = np.einsum("ni,ni->n", tau, qd)
    M = cr.metric(q, cr.ground_truth.values)
    np.testing.assert_allclose(power, np.einsum("ni,nij,nj->n", qd, M, qd), rtol=1e-12)
    assert np.all(power >= 0)


def test_chart_change_of_regressor_and_metric():
    arm = TwoLinkArm()
    rng = np.random.default_rng(7)
    D = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    q, qd, qdd = rng.normal(size=(3, 5, 2))
    pi = arm.ground_truth.values
    Yc = regressor_stack(arm, q @ D.T, qd @ D.T, qdd @ D.T, D)
    tau = arm.inverse_dynamics(q, qd, qdd, pi)
    np.testing.assert_allclose(Yc @ pi, tau @ np.linalg.inv(D), atol=1e-11)
    Mc = build_affine_metric(arm, q[0] @ D.T, D).assemble(pi)
    Dinv = np.linalg.inv(D)
    np.testing.assert_allclose(Mc, Dinv.T @ arm.metric(q[0], pi)[0] @ Dinv, atol=1e-12)


# --- dual norm and square root ---------------------------------------------


def test_dual_norm_examples():
    assert dual_norm_sq(np.eye(2), [3, 4]) == pytest.approx(25.0)
    assert dual_norm_sq(np.diag([4.0, 1.0]), [2, 0]) == pytest.approx(1.0)
    assert dual_norm_sq(np.eye(3), np.zeros(3)) == 0.0


def test_dual_norm_rejects_singular_metric():
    with pytest.raises(SingularConfigurationError) as info:
        dual_norm_sq(np.diag([1.0, 1e-12]), [1, 1])
    assert info.value.eigenvalue == pytest.approx(1e-12)
    with pytest.raises(ModelError):
        dual_norm_sq([[1.0, 0.5], [0.0, 1.0]], [1, 1])


def _spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + 0.5 * np.eye(n)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 2**32 - 1))
def test_dual_norm_congruence_invariance(n, seed):
    rng = np.random.default_rng(seed)
    M = _spd(rng, n)
    f = rng.normal(size=n)
    D = rng.normal(size=(n, n)) + 3 * np.eye(n)
    Dinv = np.linalg.inv(D)
    a = dual_norm_sq(M, f)
    b = dual_norm_sq(Dinv.T @ M @ Dinv, Dinv.T @ f)
    assert abs(a - b) <= 1e-10 * max(1.0, a)
    assert a > 0


def test_metric_sqrt():
    np.testing.assert_allclose(metric_sqrt(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(metric_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    rng = np.random.default_rng(8)
    for _ in range(10):
        M = _spd(rng, 4)
        R = metric_sqrt(M)
        np.testing.assert_allclose(R, R.T)
        np.testing.assert_allclose(R @ R, M, atol=1e-10)


# --- consistency constraints -------------------------------------------------


def test_planar_pseudo_inertia_examples():
    arm = TwoLinkArm()
    cons = consistency_constraints(arm, arm.layout)
    pseudo = cons[0].blocks[0]
    pi = np.zeros(8)
    pi[[0, 3]] = [1.0, 1.0]
    assert np.all(np.linalg.eigvalsh(pseudo.evaluate(pi)) > 0)
    pi[0] = -1.0
    assert pseudo.min_eig(pi) < 0


def test_pseudo_inertia_equivalent_to_parallel_axis_bound():
    arm = TwoLinkArm()
    pseudo = arm.consistency()[1].blocks[0]
    rng = np.random.default_rng(9)
    for _ in range(200):
        m, hx, hy, I = rng.uniform(0.1, 2), *rng.normal(size=2), rng.uniform(0, 4)
        pi = np.zeros(8)
        pi[4:] = [m, hx, hy, I]
        assert (pseudo.min_eig(pi) >= -1e-12) == (I >= (hx**2 + hy**2) / m - 1e-12)


def test_drag_coefficient_negative_is_infeasible():
    cr = DragCrawler3()
    pi = cr.ground_truth.values.copy()
    pi[2] = -0.1
    scalars = cr.consistency()[1]
    assert not scalars.check(pi)["feasible"]
    assert min(scalars.check(pi)["min_eig"].values()) == pytest.approx(-0.1)


@pytest.mark.parametrize("mech", [PanTilt(), TwoLinkArm(), DragCrawler3()], ids=lambda m: m.name)
def test_ground_truth_strictly_feasible(mech):
    for con in mech.consistency():
        for blk in con.blocks:
            assert blk.min_eig(mech.ground_truth.values) >= 1e-6


def test_constraints_are_affine():
    arm = TwoLinkArm()
    rng = np.random.default_rng(10)
    p1, p2 = rng.normal(size=(2, 8))
    for con in arm.consistency():
        for blk in con.blocks:
            for a in (0.0, 0.3, 1.0):
                np.testing.assert_allclose(blk.evaluate(a * p1 + (1 - a) * p2),
                                           a * blk.evaluate(p1) + (1 - a) * blk.evaluate(p2), atol=1e-14)


def test_affine_metric_symmetrizes_and_rejects_asymmetry():
    M = AffineMetric(np.eye(2), [[[1.0, 2.0], [2.0, 1.0]]])
    np.testing.assert_array_equal(M.assemble([2.0]), [[3.0, 4.0], [4.0, 3.0]])
    with pytest.raises(ModelError):
        AffineMetric(np.eye(2), [[[1.0, 2.0], [0.0, 1.0]]])


def test_dataset_validation():
    with pytest.raises(ModelError):
        Dataset(t=[], q=np.zeros((0, 2)), qd=np.zeros((0, 2)), tau=np.zeros((0, 2)))
    with pytest.raises(ModelError):
        Dataset(t=[0.0, 0.0], q=np.zeros((2, 2)), qd=np.zeros((2, 2)), tau=np.zeros((2, 2)))
    with pytest.raises(ModelError):
        Sample(0.0, [0, 0], [0, 0, 0], [0, 0])


@pytest.mark.parametrize("mech", [PanTilt(gravity=True), TwoLinkArm(l1=0.7), DragCrawler3(n_probes=4)],
                         ids=lambda m: m.name)
def test_description_round_trip(mech):
    again = from_description(mech.describe())
    assert again == mech
    with pytest.raises(ModelError):
        from_description({"type": "Nope"})
