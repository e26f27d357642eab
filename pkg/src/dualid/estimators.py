"""Identification objectives over a shared stacked-regression representation.

Six estimators are provided:

========== ==============================================================
OLS        ``sum |Y_i pi - tau_i|^2``
WLS        ``sum r_i^T W r_i`` with fixed ``W`` or ``W = Sigma^-1`` from OLS
EnergyLS   ``sum (qd_i^T r_i)^2``
DualMetric ``sum r_i^T M_i(pi)^-1 r_i``
RegBregman WLS + ``rho * sum_b [tr(P P0^-1) - logdet(P P0^-1) - k]``
RegPullback WLS + ``rho * (pi - pi0)^T H (pi - pi0)``
========== ==============================================================

Unconstrained least-squares objectives are solved directly; everything else
goes through :mod:`dualid.sdp`.  The dual-metric objective uses one Schur
block ``[[M_i(pi), r_i(pi)], [r_i(pi)^T, s_i]] >= 0`` per sample and minimizes
``sum s_i``.
"""

from __future__ import annotations

import dataclasses
import enum
import logging

import numpy as np
import scipy.linalg

from . import sdp
from .model import (
    DynamicParams,
    ModelClass,
    ModelError,
    SingularConfigurationError,
    metric_stack,
    regressor_stack,
    SINGULAR_RTOL,
)

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10
COV_RIDGE = 1e-10
COV_FLOOR = 1e-14
LSQ_GAP_FLOOR = 1e-5


class EstimatorKind(str, enum.Enum):
    OLS = "OLS"
    WLS = "WLS"
    ENERGY = "EnergyLS"
    DUAL_METRIC = "DualMetric"
    REG_BREGMAN = "RegBregman"
    REG_PULLBACK = "RegPullback"


ALL_KINDS = tuple(EstimatorKind)


class EstimatorError(RuntimeError):
    """An estimator could not produce a solution."""

    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


def _rank(A) -> int:
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(s > RANK_RTOL * s[0])) if s[0] > 0 else 0


@dataclasses.dataclass(frozen=True)
class Regression:
    """Stacked per-sample regressors, targets and affine metrics.

    Attributes
    ----------
    Y : (N, n, d) array
    tau : (N, n) array
        Regression targets (measured force minus any parameter-free offset).
    qd : (N, n) array
        Velocities, used by the energy objective.
    M0, Mp : (N, n, n) and (N, d, n, n) arrays
        Affine metric terms, ``M_i(pi) = M0[i] + sum_p pi_p Mp[i, p]``.
    constraints : tuple of ConsistencyConstraint
    layout : tuple of ParamEntry
    excluded : tuple of int
        Sample indices dropped by the singular-configuration guard.
    """

    Y: np.ndarray
    tau: np.ndarray
    qd: np.ndarray
    M0: np.ndarray
    Mp: np.ndarray
    constraints: tuple
    layout: tuple
    model_class: ModelClass = ModelClass.INERTIA
    chart: np.ndarray | None = None
    excluded: tuple = ()
    rank: int = -1
    prior_blocks: tuple = ()

    def __post_init__(self):
        N = len(self.Y)
        if not (len(self.tau) == len(self.qd) == len(self.M0) == len(self.Mp) == N):
            raise ModelError("regression arrays are not aligned")
        if self.rank < 0:
            object.__setattr__(self, "rank", _rank(self.A))

    @property
    def N(self) -> int:
        return len(self.Y)

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    @property
    def d(self) -> int:
        return len(self.layout)

    @property
    def A(self) -> np.ndarray:
        return self.Y.reshape(-1, self.d)

    @property
    def b(self) -> np.ndarray:
        return self.tau.reshape(-1)

    def residuals(self, pi) -> np.ndarray:
        return self.Y @ np.asarray(pi, dtype=float) - self.tau

    def metrics(self, pi) -> np.ndarray:
        return self.M0 + np.einsum("p,npij->nij", np.asarray(pi, dtype=float), self.Mp)

    def transformed(self, D) -> "Regression":
        """The same regression seen through the chart map ``q' = D q``."""
        D = np.asarray(D, dtype=float)
        Dinv = np.linalg.inv(D)
        return dataclasses.replace(
            self,
            Y=Dinv.T @ self.Y,
            tau=self.tau @ Dinv,
            qd=self.qd @ D.T,
            M0=Dinv.T @ self.M0 @ Dinv,
            Mp=Dinv.T @ self.Mp @ Dinv,
            chart=D if self.chart is None else D @ self.chart,
            rank=-1,
        )

    def subset(self, idx) -> "Regression":
        idx = np.asarray(idx, dtype=int)
        return dataclasses.replace(self, Y=self.Y[idx], tau=self.tau[idx], qd=self.qd[idx],
                                   M0=self.M0[idx], Mp=self.Mp[idx], rank=-1)


def build_regression(mechanism, dataset, reference=None, probes="data") -> Regression:
    """Assemble the regression for ``dataset`` (any linear chart).

    Samples whose reference metric fails ``lambda_min > 1e-8 lambda_max`` in
    the mechanism's native chart are dropped for every estimator alike.  The
    check is made in the native chart so every chart sees the same samples.

    Parameters
    ----------
    reference : array_like, optional
        Parameters for the singularity guard; defaults to the mechanism's
        nominal description.
    probes : "data", "default" or array
        Probe configurations for drag-matrix constraints.  ``"data"`` uses
        the dataset's own configurations.
    """
    if dataset.n != mechanism.n:
        raise ModelError(f"dataset has dimension {dataset.n}, mechanism has {mechanism.n}")
    chart = dataset.chart
    Y = regressor_stack(mechanism, dataset.q, dataset.qd, dataset.qdd, chart)
    q_nat, qd_nat, qdd_nat = dataset.native()
    offset = mechanism.regressor_offset(q_nat, qd_nat, qdd_nat) @ np.linalg.inv(chart)
    M0, Mp = metric_stack(mechanism, dataset.q, chart)
    ref = mechanism.ground_truth.values if reference is None else np.asarray(reference, dtype=float)
    M0n, Mpn = mechanism.metric_terms(q_nat)
    w = np.linalg.eigvalsh(M0n + np.einsum("p,npij->nij", ref, Mpn))
    bad = w[:, 0] <= SINGULAR_RTOL * np.abs(w[:, -1])
    keep = np.flatnonzero(~bad)
    if len(keep) == 0:
        raise SingularConfigurationError(w[:, 0].min(), 0.0, "every sample is singular")
    if mechanism.model_class is ModelClass.DRAG:
        if isinstance(probes, str) and probes == "data":
            probe_q = q_nat[keep]
        elif isinstance(probes, str) and probes == "default":
            probe_q = None
        else:
            probe_q = np.atleast_2d(probes)
        constraints = mechanism.consistency(probe_q)
    else:
        constraints = mechanism.consistency()
    return Regression(
        Y=Y[keep], tau=(dataset.tau - offset)[keep], qd=dataset.qd[keep],
        M0=M0[keep], Mp=Mp[keep], constraints=tuple(constraints),
        layout=tuple(mechanism.layout), model_class=mechanism.model_class, chart=chart,
        excluded=tuple(int(i) for i in np.flatnonzero(bad)),
        prior_blocks=tuple(prior_blocks(mechanism)),
    )


def empty_regression(mechanism) -> Regression:
    """A regression with no samples (for pure-prior fits)."""
    n, d = mechanism.n, mechanism.d
    return Regression(
        Y=np.zeros((0, n, d)), tau=np.zeros((0, n)), qd=np.zeros((0, n)),
        M0=np.zeros((0, n, n)), Mp=np.zeros((0, d, n, n)),
        constraints=tuple(mechanism.consistency()), layout=tuple(mechanism.layout),
        model_class=mechanism.model_class, prior_blocks=tuple(prior_blocks(mechanism)),
    )


def prior_blocks(mechanism) -> list:
    """Per-body affine matrices ``P(pi)`` used by the geometric regularizers.

    Rigid bodies use their pseudo-inertia blocks; drag systems use one 1x1
    block per coefficient.
    """
    blocks = []
    for con in mechanism.consistency(None):
        for blk in con.blocks:
            if blk.label.startswith("pseudo-inertia") or blk.label.endswith(">= 0") or blk.label.startswith("inertia"):
                blocks.append(blk)
    return blocks


# ---------------------------------------------------------------------------
# specs and reports


@dataclasses.dataclass(frozen=True)
class EstimatorSpec:
    """What to fit.

    ``weight`` is an ``(n, n)`` PD matrix or ``"auto"`` (inverse residual
    covariance of a first OLS pass).  ``rho`` is ``None`` for the automatic
    magnitude-balancing choice.
    """

    kind: EstimatorKind
    weight: object = "auto"
    rho: float | None = None
    nominal: object = None
    enforce_consistency: bool = True
    options: sdp.SdpOptions = dataclasses.field(default_factory=sdp.SdpOptions)

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if self.kind in (EstimatorKind.REG_BREGMAN, EstimatorKind.REG_PULLBACK):
            if self.nominal is None:
                raise ModelError(f"{self.kind.value} needs a nominal parameter vector")
            if self.rho is not None and self.rho <= 0:
                raise ModelError("rho must be positive")


@dataclasses.dataclass
class EstimatorReport:
    kind: str
    pi_hat: DynamicParams
    objective: float
    solver: dict
    sigma_hat: np.ndarray | None = None
    per_sample_weighted_residuals: np.ndarray | None = None
    rank: int = 0
    flags: list = dataclasses.field(default_factory=list)
    rho: float | None = None
    slacks: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.solver.get("status") == sdp.Status.OPTIMAL.value

    def to_dict(self) -> dict:
        arr = lambda v: None if v is None else np.asarray(v).tolist()
        return {
            "kind": self.kind,
            "pi_hat": self.pi_hat.to_dict(),
            "objective": float(self.objective),
            "solver": self.solver,
            "sigma_hat": arr(self.sigma_hat),
            "per_sample_weighted_residuals": arr(self.per_sample_weighted_residuals),
            "rank": self.rank,
            "flags": list(self.flags),
            "rho": self.rho,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorReport":
        opt = lambda v: None if v is None else np.asarray(v, dtype=float)
        return cls(
            kind=d["kind"], pi_hat=DynamicParams.from_dict(d["pi_hat"]), objective=d["objective"],
            solver=d["solver"], sigma_hat=opt(d.get("sigma_hat")),
            per_sample_weighted_residuals=opt(d.get("per_sample_weighted_residuals")),
            rank=d.get("rank", 0), flags=list(d.get("flags", [])), rho=d.get("rho"),
        )


# ---------------------------------------------------------------------------
# SDP plumbing


def _constraint_blocks(reg: Regression, d_total: int) -> list:
    out = []
    for con in reg.constraints:
        for blk in con.blocks:
            k = blk.F0.shape[0]
            out.append(sdp.AffineBlock(blk.F0 - blk.margin * np.eye(k), blk.F, np.arange(reg.d), label=blk.label))
    return out


def _lsq_factor(A, b):
    """Reduce ``|A x - b|^2`` to ``|R x - z|^2 + c0`` with a small square ``R``."""
    if A.shape[0] == 0:
        d = A.shape[1]
        return np.zeros((0, d)), np.zeros(0), 0.0
    Q, R = np.linalg.qr(A, mode="reduced")
    z = Q.T @ b
    c0 = max(float(b @ b - z @ z), 0.0)
    return R, z, c0


def _epigraph_block(R, z, m_total, t_index):
    """``[[I, R x - z], [., t]] >= 0`` over variables ``0..d-1`` and ``t``."""
    r, d = R.shape
    k = r + 1
    F0 = np.zeros((k, k))
    F0[:r, :r] = np.eye(r)
    F0[:r, r] = F0[r, :r] = -z
    F = np.zeros((d + 1, k, k))
    F[:d, :r, r] = R.T
    F[:d, r, :r] = R.T
    F[d, r, r] = 1.0
    index = np.concatenate([np.arange(d), [t_index]])
    return sdp.AffineBlock(F0, F, index, label="residual epigraph")


def _solve_checked(problem, options, what):
    sol = sdp.solve(problem, options)
    if sol.status is sdp.Status.INFEASIBLE:
        raise EstimatorError(f"{what}: problem is infeasible ({sol.infeasibility})", sol)
    if not sol.optimal:
        log.warning("%s: solver finished with status %s", what, sol.status.value)
    return sol


def _solve_lsq(A, b, reg: Regression, enforce: bool, options, what: str, extra_blocks=(),
               extra_c=None) -> tuple[np.ndarray, dict, list]:
    """Minimize ``|A x - b|^2 (+ extra_c^T x)`` subject to optional consistency LMIs.

    ``extra_blocks`` may carry logdet barriers; they are weighted in the same
    units as the data term.
    """
    d = reg.d
    flags = []
    if not enforce and not extra_blocks and extra_c is None:
        x, *_ = np.linalg.lstsq(A, b, rcond=None) if A.shape[0] else (np.zeros(d),)
        if _rank(A) < d:
            flags.append("rank-deficient: minimum-norm solution")
        return x, {"status": sdp.Status.OPTIMAL.value, "method": "lstsq"}, flags
    # divide the data term by the RMS target so the epigraph block has O(1) entries
    sigma = max(1.0, float(np.sqrt(np.mean(b ** 2)))) if len(b) else 1.0
    R, z, _ = _lsq_factor(A / sigma, b / sigma)
    blocks = []
    c = np.zeros(d + 1)
    c[d] = 1.0
    if extra_c is not None:
        c[:d] = np.asarray(extra_c) / sigma ** 2
    if R.shape[0]:
        blocks.append(_epigraph_block(R, z, d + 1, d))
    else:
        c = c[:d]
    blocks += [dataclasses.replace(blk, logdet_weight=blk.logdet_weight / sigma ** 2) for blk in extra_blocks]
    if enforce:
        blocks += _constraint_blocks(reg, d)
    if not blocks:
        return np.zeros(d), {"status": sdp.Status.OPTIMAL.value, "method": "trivial"}, flags
    # in these units the zero-parameter objective is ~len(b); judge the gap relative
    # to the objective itself down to LSQ_GAP_FLOOR
    opts = dataclasses.replace(options, gap_floor=min(options.gap_floor, LSQ_GAP_FLOOR))
    sol = _solve_checked(sdp.SdpProblem(c, blocks), opts, what)
    return sol.x[:d], sol.summary(), flags


def _check_rank(reg, flags):
    if reg.N and reg.rank < reg.d:
        flags.append(f"rank {reg.rank} < {reg.d}: parameters not fully identifiable")


# ---------------------------------------------------------------------------
# estimators


def _report(kind, reg, x, objective, solver, flags, **kw):
    return EstimatorReport(kind=kind.value, pi_hat=DynamicParams(x, reg.layout), objective=objective,
                           solver=solver, rank=reg.rank, flags=flags, **kw)


def fit_ols(reg: Regression, enforce_consistency: bool = True, options=None) -> EstimatorReport:
    options = options or sdp.SdpOptions()
    x, solver, flags = _solve_lsq(reg.A, reg.b, reg, enforce_consistency, options, "OLS")
    _check_rank(reg, flags)
    r = reg.residuals(x)
    per = np.einsum("ni,ni->n", r, r)
    return _report(EstimatorKind.OLS, reg, x, float(per.sum()), solver, flags,
                   per_sample_weighted_residuals=per)


def residual_covariance(reg: Regression, pi=None) -> np.ndarray:
    """``(1/N) sum r r^T`` at ``pi`` (first-pass OLS when omitted), ridge-repaired.

    Each coordinate's variance is floored at ``COV_FLOOR`` times its mean
    squared force, so round-off residuals of noiseless data do not turn into
    weights of order 1e28.
    """
    if reg.N == 0:
        return np.eye(reg.n)
    if pi is None:
        pi = fit_ols(reg, enforce_consistency=False).pi_hat.values
    r = reg.residuals(pi)
    S = r.T @ r / reg.N + np.diag(COV_FLOOR * np.mean(reg.tau ** 2, axis=0))
    tr = float(np.trace(S))
    if tr <= 0:
        return np.eye(reg.n)
    S = S + COV_RIDGE * tr / reg.n * np.eye(reg.n)
    w = np.linalg.eigvalsh(S)
    if w[0] <= 0 or w[-1] / w[0] > 1e15:
        raise EstimatorError("residual covariance is singular beyond ridge repair")
    return S


def _weight_matrix(reg, weight):
    if isinstance(weight, str):
        if weight != "auto":
            raise ModelError(f"unknown weight policy {weight!r}")
        S = residual_covariance(reg)
        return np.linalg.inv(S), S
    W = np.asarray(weight, dtype=float)
    if W.shape != (reg.n, reg.n):
        raise ModelError(f"weight must be {reg.n}x{reg.n}")
    W = 0.5 * (W + W.T)
    if np.linalg.eigvalsh(W)[0] <= 0:
        raise ModelError("weight must be positive definite")
    return W, None


def _whitened(reg, W):
    L = np.linalg.cholesky(W)  # W = L L^T, r^T W r = |L^T r|^2
    A = np.einsum("ji,njd->nid", L, reg.Y).reshape(-1, reg.d)
    b = (reg.tau @ L).reshape(-1)
    return A, b


def fit_wls(reg: Regression, weight="auto", enforce_consistency: bool = True, options=None) -> EstimatorReport:
    options = options or sdp.SdpOptions()
    W, S = _weight_matrix(reg, weight)
    A, b = _whitened(reg, W)
    x, solver, flags = _solve_lsq(A, b, reg, enforce_consistency, options, "WLS")
    _check_rank(reg, flags)
    r = reg.residuals(x)
    per = np.einsum("ni,ij,nj->n", r, W, r)
    return _report(EstimatorKind.WLS, reg, x, float(per.sum()), solver, flags,
                   sigma_hat=S, per_sample_weighted_residuals=per)


def fit_energy(reg: Regression, enforce_consistency: bool = True, options=None) -> EstimatorReport:
    options = options or sdp.SdpOptions()
    A = np.einsum("ni,nid->nd", reg.qd, reg.Y)
    b = np.einsum("ni,ni->n", reg.qd, reg.tau)
    flags = []
    rank = _rank(A)
    if rank == 0:
        flags.append("non-identifying: energy regressor has rank 0")
    elif rank < reg.d:
        flags.append(f"energy regressor rank {rank} < {reg.d}")
    x, solver, more = _solve_lsq(A, b, reg, enforce_consistency, options, "EnergyLS")
    flags += [f for f in more if f not in flags]
    per = (A @ x - b) ** 2
    rep = _report(EstimatorKind.ENERGY, reg, x, float(per.sum()), solver, flags,
                  per_sample_weighted_residuals=per)
    rep.rank = rank
    return rep


def dual_metric_problem(reg: Regression, enforce_consistency: bool = True) -> sdp.SdpProblem:
    """The Schur-epigraph SDP: variables ``(pi, s_1..s_N)``, objective ``sum s_i``."""
    N, n, d = reg.N, reg.n, reg.d
    k = n + 1
    blocks = []
    for i in range(N):
        F0 = np.zeros((k, k))
        F0[:n, :n] = reg.M0[i]
        F0[:n, n] = F0[n, :n] = -reg.tau[i]
        F = np.zeros((d + 1, k, k))
        F[:d, :n, :n] = reg.Mp[i]
        F[:d, :n, n] = reg.Y[i].T
        F[:d, n, :n] = reg.Y[i].T
        F[d, n, n] = 1.0
        blocks.append(sdp.AffineBlock(F0, F, np.concatenate([np.arange(d), [d + i]]), label=f"schur {i}"))
    if enforce_consistency:
        blocks += _constraint_blocks(reg, d)
    c = np.concatenate([np.zeros(d), np.ones(N)])
    return sdp.SdpProblem(c, blocks)


def dual_metric_objective(reg: Regression, pi) -> np.ndarray:
    """Per-sample ``r_i^T M_i(pi)^-1 r_i`` (``inf`` where the metric is not PD)."""
    M = reg.metrics(pi)
    r = reg.residuals(pi)
    out = np.empty(reg.N)
    for i in range(reg.N):
        try:
            c = scipy.linalg.cho_factor(M[i])
            out[i] = r[i] @ scipy.linalg.cho_solve(c, r[i])
        except np.linalg.LinAlgError:
            out[i] = np.inf
    return out


def fit_dual_metric(reg: Regression, enforce_consistency: bool = True, options=None) -> EstimatorReport:
    options = options or sdp.SdpOptions()
    if reg.N == 0:
        raise ModelError("dual-metric fit needs data")
    prob = dual_metric_problem(reg, enforce_consistency)
    sol = _solve_checked(prob, options, "DualMetric")
    x = sol.x[: reg.d]
    flags = []
    _check_rank(reg, flags)
    per = dual_metric_objective(reg, x)
    if not np.all(np.isfinite(per)):
        flags.append("metric not positive definite at the estimate for some samples")
    return _report(EstimatorKind.DUAL_METRIC, reg, x, float(sol.objective_value), sol.summary(), flags,
                   per_sample_weighted_residuals=per, slacks=sol.x[reg.d:])


# --- geometric regularizers -------------------------------------------------


def bregman_divergence(blocks, pi, pi0) -> float:
    """``sum_b tr(P P0^-1) - logdet(P P0^-1) - k`` (``inf`` outside the PD cone)."""
    total = 0.0
    for blk in blocks:
        P, P0 = blk.evaluate(pi), blk.evaluate(pi0)
        k = P.shape[0]
        s, ld = np.linalg.slogdet(P)
        s0, ld0 = np.linalg.slogdet(P0)
        if s <= 0:
            return np.inf
        total += np.trace(np.linalg.solve(P0, P)) - (ld - ld0) - k
    return float(total)


def affine_invariant_distance_sq(blocks, pi, pi0) -> float:
    """``sum_b |log(P0^-1/2 P P0^-1/2)|_F^2``."""
    total = 0.0
    for blk in blocks:
        P, P0 = blk.evaluate(pi), blk.evaluate(pi0)
        w0, V0 = np.linalg.eigh(P0)
        iroot = (V0 / np.sqrt(w0)) @ V0.T
        w = np.linalg.eigvalsh(iroot @ P @ iroot)
        if w[0] <= 0:
            return np.inf
        total += float(np.sum(np.log(w) ** 2))
    return total


def pullback_hessian(blocks, pi0, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian of the squared affine-invariant distance at ``pi0``."""
    pi0 = np.asarray(pi0, dtype=float)
    d = len(pi0)
    floor = 1e-3 * max(np.max(np.abs(pi0)), 1e-12)
    h = rel_step * np.maximum(np.abs(pi0), floor)
    f = lambda x: affine_invariant_distance_sq(blocks, x, pi0)
    H = np.zeros((d, d))
    f0 = f(pi0)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(pi0 + ei) - 2 * f0 + f(pi0 - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(pi0 + ei + ej) - f(pi0 + ei - ej) - f(pi0 - ei + ej) + f(pi0 - ei - ej)
            ) / (4 * h[i] * h[j])
    return 0.5 * (H + H.T)


def _nominal_values(reg, nominal):
    v = nominal.values if isinstance(nominal, DynamicParams) else np.asarray(nominal, dtype=float)
    if len(v) != reg.d:
        raise ModelError("nominal has the wrong length")
    for con in reg.constraints:
        for blk in con.blocks:
            if blk.min_eig(v) < blk.margin - 1e-10:
                raise ModelError(f"nominal violates {blk.label!r}")
    for blk in reg.prior_blocks:
        if blk.min_eig(v) <= 0:
            raise ModelError(f"nominal is not strictly inside {blk.label!r}")
    return v


def default_rho(reg: Regression, pi0, W=None) -> float:
    """``1e-2 * J / (g + eps)`` with ``J`` the WLS objective and ``g`` the pullback form at the WLS fit."""
    if reg.N == 0:
        return 1.0
    if W is None:
        W, _ = _weight_matrix(reg, "auto")
    A, b = _whitened(reg, W)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    J = float(np.sum((A @ x - b) ** 2))
    H = pullback_hessian(reg.prior_blocks, pi0)
    g = float((x - pi0) @ H @ (x - pi0))
    return 1e-2 * max(J, 1e-12) / (g + 1e-12)


def fit_regularized(reg: Regression, kind, nominal, rho=None, enforce_consistency: bool = True,
                    options=None) -> EstimatorReport:
    options = options or sdp.SdpOptions()
    kind = EstimatorKind(kind)
    if kind not in (EstimatorKind.REG_BREGMAN, EstimatorKind.REG_PULLBACK):
        raise ModelError(f"{kind.value} is not a regularized estimator")
    pi0 = _nominal_values(reg, nominal)
    if reg.N:
        W, S = _weight_matrix(reg, "auto")
        A, b = _whitened(reg, W)
    else:
        W, S = np.eye(reg.n), None
        A, b = np.zeros((0, reg.d)), np.zeros(0)
    if rho is None:
        rho = default_rho(reg, pi0, W)
    if rho <= 0:
        raise ModelError("rho must be positive")
    d = reg.d
    flags = []
    if kind is EstimatorKind.REG_PULLBACK:
        H = pullback_hessian(reg.prior_blocks, pi0)
        w, V = np.linalg.eigh(H)
        LH = np.sqrt(np.clip(w, 0, None))[:, None] * V.T
        A2 = np.vstack([A, np.sqrt(rho) * LH])
        b2 = np.concatenate([b, np.sqrt(rho) * LH @ pi0])
        x, solver, flags = _solve_lsq(A2, b2, reg, enforce_consistency, options, kind.value)
        g = float((x - pi0) @ H @ (x - pi0))
    else:
        # rho * [tr(P0^-1 P(pi)) - logdet P(pi)] + const; the trace part is linear in pi
        lin = np.zeros(d)
        ld_blocks = []
        for blk in reg.prior_blocks:
            P0inv = np.linalg.inv(blk.evaluate(pi0))
            lin += rho * np.einsum("ij,pji->p", P0inv, blk.F)
            ld_blocks.append(sdp.AffineBlock(blk.F0, blk.F, np.arange(d), logdet_weight=rho,
                                             label=f"logdet {blk.label}"))
        x, solver, flags = _solve_lsq(A, b, reg, enforce_consistency, options, kind.value,
                                      extra_blocks=ld_blocks, extra_c=lin)
        g = bregman_divergence(reg.prior_blocks, x, pi0)
    _check_rank(reg, flags)
    r = reg.residuals(x)
    per = np.einsum("ni,ij,nj->n", r, W, r)
    return _report(kind, reg, x, float(per.sum() + rho * g), solver, flags, sigma_hat=S,
                   per_sample_weighted_residuals=per, rho=float(rho))


def fit(reg: Regression, spec: EstimatorSpec) -> EstimatorReport:
    """Dispatch on ``spec.kind``."""
    k = spec.kind
    opts = spec.options
    if k is EstimatorKind.OLS:
        return fit_ols(reg, spec.enforce_consistency, opts)
    if k is EstimatorKind.WLS:
        return fit_wls(reg, spec.weight, spec.enforce_consistency, opts)
    if k is EstimatorKind.ENERGY:
        return fit_energy(reg, spec.enforce_consistency, opts)
    if k is EstimatorKind.DUAL_METRIC:
        return fit_dual_metric(reg, spec.enforce_consistency, opts)
    return fit_regularized(reg, k, spec.nominal, spec.rho, spec.enforce_consistency, opts)
