"""Parameter layouts, datasets, regressors, affine metrics and dual-norm geometry.

Every mechanism is described in its *native* chart.  A :class:`Dataset` may be
expressed in a different linear chart ``q' = D q``; the functions here map the
kinematics back to the native chart, evaluate the mechanism there and push the
result forward, so that regressors and metrics are always expressed in the
dataset's own chart::

    Y'  = D^{-T} Y          tau' = D^{-T} tau
    M'  = D^{-T} M D^{-1}   qd'  = D qd
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Sequence

import numpy as np

SYMMETRY_TOL = 1e-9
SINGULAR_RTOL = 1e-8


class ModelClass(str, enum.Enum):
    INERTIA = "InertiaDominated"
    DRAG = "DragDominated"


class ModelError(ValueError):
    """Inconsistent model, layout or sample data."""


class SingularConfigurationError(ModelError):
    """A metric failed the positive-definiteness guard.

    Attributes
    ----------
    eigenvalue : float
        Smallest eigenvalue of the offending metric.
    threshold : float
        The guard value it had to exceed.
    """

    def __init__(self, eigenvalue: float, threshold: float, where: str = ""):
        self.eigenvalue = float(eigenvalue)
        self.threshold = float(threshold)
        msg = f"metric not positive definite: min eigenvalue {eigenvalue:.3e} <= {threshold:.3e}"
        super().__init__(f"{msg} ({where})" if where else msg)


def symmetrize(a, what: str = "matrix") -> np.ndarray:
    """Return ``(A + A^T)/2`` after checking the asymmetry is below 1e-9 (relative)."""
    a = np.asarray(a, dtype=float)
    at = np.swapaxes(a, -1, -2)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - at)) > SYMMETRY_TOL * scale:
        raise ModelError(f"{what} is not symmetric")
    return 0.5 * (a + at)


# ---------------------------------------------------------------------------
# parameters


@dataclasses.dataclass(frozen=True)
class ParamEntry:
    name: str
    role: str
    unit: str = ""
    body: str = ""


@dataclasses.dataclass(frozen=True)
class DynamicParams:
    """Parameter vector together with its named layout."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        values.setflags(write=False)
        layout = tuple(self.layout)
        if len(values) != len(layout):
            raise ModelError(f"{len(values)} values for a layout of {len(layout)} entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.layout]

    def __len__(self):
        return len(self.values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def replace(self, values) -> "DynamicParams":
        return DynamicParams(values, self.layout)

    def to_dict(self) -> dict:
        return {
            "values": [float(v) for v in self.values],
            "layout": [dataclasses.asdict(e) for e in self.layout],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicParams":
        return cls(d["values"], [ParamEntry(**e) for e in d["layout"]])


# ---------------------------------------------------------------------------
# data


@dataclasses.dataclass(frozen=True)
class Sample:
    t: float
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    qdd: np.ndarray | None = None

    def __post_init__(self):
        n = len(np.atleast_1d(self.q))
        for name in ("q", "qd", "tau", "qdd"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float).reshape(-1)
            if len(v) != n:
                raise ModelError(f"sample field {name} has length {len(v)}, expected {n}")
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return len(self.q)


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Time-ordered samples stored as stacked arrays.

    ``chart`` is the linear map from the mechanism's native chart to the chart
    the data is expressed in (identity for native data).
    """

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    qdd: np.ndarray | None = None
    dt: float = 0.0
    chart_id: str = "native"
    chart: np.ndarray | None = None
    coordinate_names: tuple = ()
    units: tuple = ()
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        if len(t) == 0:
            raise ModelError("dataset is empty")
        if np.any(np.diff(t) <= 0):
            raise ModelError("timestamps must be strictly increasing")
        arrays = {}
        for name in ("q", "qd", "tau", "qdd"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.atleast_2d(np.asarray(v, dtype=float))
            if v.shape[0] != len(t):
                raise ModelError(f"{name} has {v.shape[0]} rows for {len(t)} timestamps")
            arrays[name] = v
        n = arrays["q"].shape[1]
        if any(v.shape[1] != n for v in arrays.values()):
            raise ModelError("all per-sample vectors must have the same length")
        chart = np.eye(n) if self.chart is None else np.asarray(self.chart, dtype=float)
        if chart.shape != (n, n):
            raise ModelError(f"chart must be {n}x{n}")
        names = tuple(self.coordinate_names) or tuple(f"q_{i + 1}" for i in range(n))
        units = tuple(self.units) or ("",) * n
        if len(names) != n or len(units) != n:
            raise ModelError("coordinate metadata does not match n")
        object.__setattr__(self, "t", t)
        for k, v in arrays.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "chart", chart)
        object.__setattr__(self, "coordinate_names", names)
        object.__setattr__(self, "units", units)
        if not self.dt:
            object.__setattr__(self, "dt", float(np.median(np.diff(t))) if len(t) > 1 else 0.0)

    @property
    def n(self) -> int:
        return self.q.shape[1]

    def __len__(self):
        return len(self.t)

    @property
    def samples(self) -> list[Sample]:
        qdd = self.qdd if self.qdd is not None else [None] * len(self)
        return [Sample(t, q, qd, tau, a) for t, q, qd, tau, a in zip(self.t, self.q, self.qd, self.tau, qdd)]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], **kw) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ModelError("dataset is empty")
        has_qdd = all(s.qdd is not None for s in samples)
        return cls(
            t=[s.t for s in samples],
            q=[s.q for s in samples],
            qd=[s.qd for s in samples],
            tau=[s.tau for s in samples],
            qdd=[s.qdd for s in samples] if has_qdd else None,
            **kw,
        )

    def subset(self, idx) -> "Dataset":
        idx = np.sort(np.asarray(idx, dtype=int))
        return dataclasses.replace(
            self,
            t=self.t[idx],
            q=self.q[idx],
            qd=self.qd[idx],
            tau=self.tau[idx],
            qdd=None if self.qdd is None else self.qdd[idx],
            dt=0.0,
        )

    def native(self) -> tuple:
        """Kinematics ``(q, qd, qdd)`` mapped back to the mechanism's native chart."""
        Dinv = np.linalg.inv(self.chart)
        conv = lambda a: None if a is None else a @ Dinv.T
        return conv(self.q), conv(self.qd), conv(self.qdd)


def concatenate(datasets: Sequence[Dataset]) -> Dataset:
    """Join datasets in the same chart; later segments are shifted in time."""
    datasets = list(datasets)
    if not datasets:
        raise ModelError("nothing to concatenate")
    first = datasets[0]
    for d in datasets[1:]:
        if d.n != first.n or not np.array_equal(d.chart, first.chart):
            raise ModelError("datasets must share dimension and chart")
    ts, offset = [], 0.0
    for d in datasets:
        ts.append(d.t - d.t[0] + offset)
        offset = ts[-1][-1] + (d.dt or 1.0)
    has_qdd = all(d.qdd is not None for d in datasets)
    return dataclasses.replace(
        first,
        t=np.concatenate(ts),
        q=np.vstack([d.q for d in datasets]),
        qd=np.vstack([d.qd for d in datasets]),
        tau=np.vstack([d.tau for d in datasets]),
        qdd=np.vstack([d.qdd for d in datasets]) if has_qdd else None,
        dt=first.dt,
    )


# ---------------------------------------------------------------------------
# regressor / metric containers


@dataclasses.dataclass(frozen=True)
class RegressorRow:
    """Per-sample regressor; ``tau_pred = Y @ pi + offset``."""

    Y: np.ndarray
    offset: np.ndarray | None = None

    def predict(self, pi) -> np.ndarray:
        out = self.Y @ np.asarray(pi, dtype=float)
        return out if self.offset is None else out + self.offset


@dataclasses.dataclass(frozen=True)
class AffineMetric:
    """``M(pi) = M0 + sum_p pi_p Mp[p]`` at one sample."""

    M0: np.ndarray
    Mp: np.ndarray

    def __post_init__(self):
        M0 = symmetrize(self.M0, "M0")
        n = M0.shape[0]
        Mp = symmetrize(np.asarray(self.Mp, dtype=float).reshape(-1, n, n), "Mp")
        object.__setattr__(self, "M0", M0)
        object.__setattr__(self, "Mp", Mp)

    def assemble(self, pi) -> np.ndarray:
        return self.M0 + np.einsum("p,pij->ij", np.asarray(pi, dtype=float), self.Mp)


@dataclasses.dataclass(frozen=True)
class LmiBlock:
    """Affine symmetric form ``F0 + sum_p pi_p F[p] >= margin * I``."""

    F0: np.ndarray
    F: np.ndarray
    label: str
    margin: float = 0.0

    def __post_init__(self):
        F0 = symmetrize(np.atleast_2d(self.F0), self.label)
        k = F0.shape[0]
        object.__setattr__(self, "F0", F0)
        object.__setattr__(self, "F", symmetrize(np.asarray(self.F, dtype=float).reshape(-1, k, k), self.label))

    def evaluate(self, pi) -> np.ndarray:
        return self.F0 + np.einsum("p,pij->ij", np.asarray(pi, dtype=float), self.F)

    def min_eig(self, pi) -> float:
        return float(np.linalg.eigvalsh(self.evaluate(pi))[0])


@dataclasses.dataclass(frozen=True)
class ConsistencyConstraint:
    blocks: tuple
    label: str = ""

    def check(self, pi, tol: float = 1e-8) -> dict:
        eigs = {b.label: b.min_eig(pi) for b in self.blocks}
        ok = all(e >= b.margin - tol for e, b in zip(eigs.values(), self.blocks))
        return {"feasible": ok, "min_eig": eigs}


# ---------------------------------------------------------------------------
# geometry


def _guarded_cholesky(M: np.ndarray, where: str = "") -> np.ndarray:
    M = symmetrize(M, "metric")
    w = np.linalg.eigvalsh(M)
    threshold = SINGULAR_RTOL * max(abs(w[-1]), np.finfo(float).tiny)
    if w[0] <= threshold:
        raise SingularConfigurationError(w[0], threshold, where)
    return np.linalg.cholesky(M)


def check_metric(M, where: str = "") -> None:
    """Raise :class:`SingularConfigurationError` unless ``lambda_min > 1e-8 lambda_max``."""
    _guarded_cholesky(np.asarray(M, dtype=float), where)


def dual_norm_sq(metric, f) -> float:
    """Squared dual norm ``f^T M^{-1} f`` of a covector.

    Evaluated as ``|L^{-1} f|^2`` with ``M = L L^T``; the inverse is never
    formed.

    Parameters
    ----------
    metric : (n, n) array_like
        Symmetric positive-definite metric.
    f : (n,) array_like
        Covector components in the same chart as ``metric``.

    Raises
    ------
    SingularConfigurationError
        If the metric fails the positive-definiteness guard.
    """
    import scipy.linalg

    L = _guarded_cholesky(np.asarray(metric, dtype=float))
    f = np.asarray(f, dtype=float).reshape(-1)
    if len(f) != L.shape[0]:
        raise ModelError("covector and metric dimensions differ")
    z = scipy.linalg.solve_triangular(L, f, lower=True)
    return float(z @ z)


def metric_sqrt(metric) -> np.ndarray:
    """Symmetric square root ``M^{1/2}`` of a positive-definite metric."""
    M = np.asarray(metric, dtype=float)
    _guarded_cholesky(M)
    w, V = np.linalg.eigh(symmetrize(M))
    return (V * np.sqrt(w)) @ V.T


# ---------------------------------------------------------------------------
# mechanism-facing builders


def _chart_of(sample_or_dataset):
    chart = getattr(sample_or_dataset, "chart", None)
    return None if chart is None else np.asarray(chart, dtype=float)


def build_regressor(mechanism, sample: Sample, chart=None) -> RegressorRow:
    """Regressor of one sample, expressed in the sample's chart.

    ``chart`` is the linear map from the mechanism's native chart (identity when
    omitted).
    """
    n = mechanism.n
    if sample.n != n:
        raise ModelError(f"sample has dimension {sample.n}, mechanism has {n}")
    if mechanism.model_class is ModelClass.INERTIA and sample.qdd is None:
        raise ModelError("inertia-dominated models need accelerations")
    Y = regressor_stack(mechanism, sample.q[None], sample.qd[None],
                        None if sample.qdd is None else sample.qdd[None], chart)
    return RegressorRow(Y[0])


def regressor_stack(mechanism, q, qd, qdd=None, chart=None) -> np.ndarray:
    """Vectorized regressors ``(N, n, d)`` for kinematics given in ``chart``."""
    q, qd = np.atleast_2d(q), np.atleast_2d(qd)
    if q.shape[1] != mechanism.n:
        raise ModelError(f"kinematics have dimension {q.shape[1]}, mechanism has {mechanism.n}")
    if mechanism.model_class is ModelClass.INERTIA and qdd is None:
        raise ModelError("inertia-dominated models need accelerations")
    if chart is None:
        return mechanism.regressor(q, qd, qdd)
    Dinv = np.linalg.inv(chart)
    conv = lambda a: None if a is None else np.atleast_2d(a) @ Dinv.T
    Y = mechanism.regressor(conv(q), conv(qd), conv(qdd))
    return Dinv.T @ Y


def metric_stack(mechanism, q, chart=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized affine metric terms ``M0 (N, n, n)`` and ``Mp (N, d, n, n)``."""
    q = np.atleast_2d(q)
    if q.shape[1] != mechanism.n:
        raise ModelError(f"configuration has dimension {q.shape[1]}, mechanism has {mechanism.n}")
    if chart is None:
        return mechanism.metric_terms(q)
    Dinv = np.linalg.inv(chart)
    M0, Mp = mechanism.metric_terms(q @ Dinv.T)
    M0 = Dinv.T @ M0 @ Dinv
    Mp = Dinv.T @ Mp @ Dinv
    return M0, Mp


def build_affine_metric(mechanism, q, chart=None) -> AffineMetric:
    q = np.asarray(q, dtype=float).reshape(-1)
    M0, Mp = metric_stack(mechanism, q[None], chart)
    return AffineMetric(M0[0], Mp[0])


def consistency_constraints(mechanism, layout=None, probes=None) -> list[ConsistencyConstraint]:
    """Physical-consistency LMIs for ``mechanism``.

    Inertia-class mechanisms give one planar pseudo-inertia block per body.
    Drag-class mechanisms give the assembled drag matrix at each probe
    configuration plus a 1x1 nonnegativity block per coefficient.
    """
    if layout is not None and tuple(layout) != tuple(mechanism.layout):
        raise ModelError("layout does not belong to this mechanism")
    return mechanism.consistency(probes)
