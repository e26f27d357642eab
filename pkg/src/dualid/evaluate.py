"""Forward-dynamics prediction, shift-searched correlation and invariance checks."""

from __future__ import annotations

import csv
import dataclasses
import io
import json

import numpy as np

from .estimators import EstimatorSpec, Regression, fit
from .model import ModelClass, ModelError, SINGULAR_RTOL, SingularConfigurationError, metric_stack, regressor_stack

PROJECTOR_RTOL = 1e-10
SHIFT_DEGREES = 5.0


def predict_forward(mechanism, pi_hat, dataset, skip_singular: bool = False):
    """Predict the measured motion signal from forces.

    Inertia-dominated mechanisms give accelerations
    ``M^-1 (tau - h(q, qd))`` where the bias ``h`` is the regressor evaluated
    at zero acceleration; drag-dominated mechanisms give velocities
    ``M^-1 tau``.  Everything is computed in the dataset's chart.

    Returns
    -------
    pred : (N, n) array
        Predictions; rows at singular samples are NaN when ``skip_singular``.
    n_singular : int
    """
    pi = np.asarray(getattr(pi_hat, "values", pi_hat), dtype=float)
    chart = dataset.chart
    M0, Mp = metric_stack(mechanism, dataset.q, chart)
    M = M0 + np.einsum("p,npij->nij", pi, Mp)
    rhs = dataset.tau.copy()
    if mechanism.model_class is ModelClass.INERTIA:
        zero = np.zeros_like(dataset.q)
        Y0 = regressor_stack(mechanism, dataset.q, dataset.qd, zero, chart)
        q_nat, qd_nat, _ = dataset.native()
        off = mechanism.regressor_offset(q_nat, qd_nat, np.zeros_like(q_nat)) @ np.linalg.inv(chart)
        rhs = rhs - Y0 @ pi - off
    pred = np.full_like(rhs, np.nan)
    w = np.linalg.eigvalsh(M)
    ok = w[:, 0] > SINGULAR_RTOL * np.abs(w[:, -1])
    if not np.all(ok) and not skip_singular:
        i = int(np.flatnonzero(~ok)[0])
        raise SingularConfigurationError(w[i, 0], SINGULAR_RTOL * abs(w[i, -1]), f"test sample {i}")
    if np.any(ok):
        pred[ok] = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
    return pred, int(np.sum(~ok))


def measured_signal(mechanism, dataset) -> np.ndarray:
    return dataset.qdd if mechanism.model_class is ModelClass.INERTIA else dataset.qd


def shift_window(slowest_period: float, rate: float, degrees: float = SHIFT_DEGREES) -> int:
    return int(round(degrees / 360.0 * slowest_period * rate))


@dataclasses.dataclass(frozen=True)
class NccResult:
    ncc: float
    shift: int
    degenerate: bool = False


def _ncc(a, b):
    mask = np.isfinite(a) & np.isfinite(b)
    a, b = a[mask], b[mask]
    if len(a) < 2:
        return 0.0, True
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), np.finfo(float).tiny)
    if na <= 1e-12 * scale * np.sqrt(len(a)) or nb <= 1e-12 * scale * np.sqrt(len(b)) or na == 0 or nb == 0:
        return 0.0, True
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0)), False


def ncc_max_shift(pred, meas, slowest_period: float, rate: float) -> NccResult:
    """Largest zero-mean normalized cross-correlation over a bounded shift window.

    Shifts ``k`` with ``|k| <= round(5/360 * slowest_period * rate)`` are
    searched; ``k > 0`` means ``pred`` lags ``meas`` (``pred[i + k]`` is
    compared with ``meas[i]``).  Ties go to the smallest ``|k|``.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1)
    meas = np.asarray(meas, dtype=float).reshape(-1)
    if len(pred) != len(meas):
        raise ModelError("signals must have equal length")
    K = shift_window(slowest_period, rate)
    if K >= len(pred) - 1:
        raise ModelError(f"shift window {K} exceeds the signal length {len(pred)}")
    best = None
    for k in sorted(range(-K, K + 1), key=lambda k: (abs(k), k)):
        if k >= 0:
            val, deg = _ncc(pred[k:], meas[: len(meas) - k])
        else:
            val, deg = _ncc(pred[: len(pred) + k], meas[-k:])
        if best is None or val > best.ncc:
            best = NccResult(val, k, deg)
    return best


def identifiable_projection(reg_or_A) -> np.ndarray:
    """Orthogonal projector onto the row space of the stacked regressor."""
    A = reg_or_A.A if isinstance(reg_or_A, Regression) else np.asarray(reg_or_A, dtype=float)
    d = A.shape[1]
    if A.size == 0:
        return np.zeros((d, d))
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[0] == 0:
        return np.zeros((d, d))
    V = Vt[s > PROJECTOR_RTOL * s[0]]
    return V.T @ V


def parameter_errors(pi_hat, pi_true, projector) -> dict:
    e = np.asarray(getattr(pi_hat, "values", pi_hat)) - np.asarray(getattr(pi_true, "values", pi_true))
    ref = max(np.linalg.norm(projector @ np.asarray(getattr(pi_true, "values", pi_true))), 1e-300)
    return {
        "raw": float(np.linalg.norm(e)),
        "projected": float(np.linalg.norm(projector @ e)),
        "projected_relative": float(np.linalg.norm(projector @ e) / ref),
    }


def invariance_probe(reg: Regression, spec: EstimatorSpec, D_list, projector=None) -> list[dict]:
    """Refit under each chart map and report parameter and objective shifts.

    With ``projector`` the parameter shift is measured on the identifiable
    subspace only.
    """
    base = fit(reg, spec)
    P = np.eye(reg.d) if projector is None else projector
    x0 = P @ base.pi_hat.values
    rows = []
    for D in D_list:
        D = np.asarray(D, dtype=float)
        if D.ndim == 1:
            D = np.diag(D)
        other = fit(reg.transformed(D), spec)
        x1 = P @ other.pi_hat.values
        rows.append({
            "estimator": spec.kind.value,
            "D": D.tolist(),
            "pi_shift": float(np.linalg.norm(x1 - x0) / max(np.linalg.norm(x0), 1e-300)),
            "objective_shift": float(abs(other.objective - base.objective) / max(abs(base.objective), 1e-300)),
            "status": other.solver.get("status"),
        })
    return rows


# ---------------------------------------------------------------------------


@dataclasses.dataclass
class EvalReport:
    """Per-estimator evaluation on a set of test trajectories.

    ``ncc`` and ``shift`` have shape ``(trajectories, coordinates)``.
    """

    estimator: str
    coordinate_names: tuple
    ncc: np.ndarray
    shift: np.ndarray
    rmse: np.ndarray
    degenerate: np.ndarray
    n_singular: list
    parameter_errors: dict = dataclasses.field(default_factory=dict)
    invariance: list = dataclasses.field(default_factory=list)

    @property
    def ncc_mean(self) -> np.ndarray:
        return self.ncc.mean(axis=0)

    @property
    def ncc_std(self) -> np.ndarray:
        return self.ncc.std(axis=0)

    def mean_over(self, coords) -> float:
        return float(self.ncc[:, list(coords)].mean())

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "coordinates": list(self.coordinate_names),
            "ncc": self.ncc.tolist(),
            "shift": self.shift.tolist(),
            "rmse": self.rmse.tolist(),
            "degenerate": self.degenerate.tolist(),
            "n_singular": list(self.n_singular),
            "ncc_mean": self.ncc_mean.tolist(),
            "ncc_std": self.ncc_std.tolist(),
            "parameter_errors": self.parameter_errors,
            "invariance": self.invariance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            estimator=d["estimator"], coordinate_names=tuple(d["coordinates"]),
            ncc=np.asarray(d["ncc"], dtype=float), shift=np.asarray(d["shift"], dtype=int),
            rmse=np.asarray(d["rmse"], dtype=float), degenerate=np.asarray(d["degenerate"], dtype=bool),
            n_singular=list(d["n_singular"]), parameter_errors=d.get("parameter_errors", {}),
            invariance=d.get("invariance", []),
        )

    def csv_rows(self) -> list[dict]:
        rows = []
        for j, traj in enumerate(self.ncc):
            for c, name in enumerate(self.coordinate_names):
                rows.append({
                    "estimator": self.estimator, "coordinate": name, "trajectory": j,
                    "ncc": repr(float(self.ncc[j, c])), "shift": int(self.shift[j, c]),
                    "rmse": repr(float(self.rmse[j, c])),
                })
        return rows


CSV_FIELDS = ("estimator", "coordinate", "trajectory", "ncc", "shift", "rmse")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerows(r.csv_rows())
    return buf.getvalue()


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def evaluate_estimate(mechanism, estimator: str, pi_hat, test_sets, slowest_periods=None,
                      truth=None, projector=None) -> EvalReport:
    """Shift-searched NCC per coordinate and test trajectory."""
    test_sets = list(test_sets)
    if not test_sets:
        raise ModelError("no test trajectories")
    n = test_sets[0].n
    ncc = np.zeros((len(test_sets), n))
    shift = np.zeros((len(test_sets), n), dtype=int)
    rmse = np.zeros((len(test_sets), n))
    degenerate = np.zeros((len(test_sets), n), dtype=bool)
    n_sing = []
    for j, ds in enumerate(test_sets):
        T = ds.meta.get("slowest_period") if slowest_periods is None else slowest_periods[j]
        if T is None:
            raise ModelError("slowest motion period unknown for a test trajectory")
        rate = 1.0 / ds.dt
        pred, ns = predict_forward(mechanism, pi_hat, ds, skip_singular=True)
        n_sing.append(ns)
        meas = measured_signal(mechanism, ds)
        for c in range(n):
            res = ncc_max_shift(pred[:, c], meas[:, c], T, rate)
            ncc[j, c], shift[j, c], degenerate[j, c] = res.ncc, res.shift, res.degenerate
            rmse[j, c] = float(np.sqrt(np.nanmean((pred[:, c] - meas[:, c]) ** 2)))
    errs = {}
    if truth is not None:
        P = np.eye(len(np.atleast_1d(getattr(truth, "values", truth)))) if projector is None else projector
        errs = parameter_errors(pi_hat, truth, P)
    return EvalReport(estimator, tuple(test_sets[0].coordinate_names), ncc, shift, rmse, degenerate,
                      n_sing, errs)
