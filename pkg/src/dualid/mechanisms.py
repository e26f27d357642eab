"""Desk-scale mechanisms with known dynamics.

Each mechanism exposes two independent evaluation routes:

* the *affine* route used by identification (``metric_terms``, ``regressor``),
  built from per-parameter coefficient matrices, and
* the *direct* route (``metric``, ``inverse_dynamics``) written out in closed
  form from the physical description and used for simulation.

Keeping them separate lets the tests check one against the other.

All functions are vectorized over a leading sample axis.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .model import (
    ConsistencyConstraint,
    DynamicParams,
    LmiBlock,
    ModelClass,
    ModelError,
    ParamEntry,
)

GRAVITY = 9.81


def _rows(x):
    x = np.asarray(x, dtype=float)
    return x[None] if x.ndim == 1 else x


class Mechanism:
    """Common machinery; subclasses provide the per-parameter terms."""

    name = ""
    model_class = ModelClass.INERTIA
    coordinate_names: tuple = ()
    units: tuple = ()
    shape_coordinates: tuple = ()

    @property
    def n(self) -> int:
        return len(self.coordinate_names)

    @property
    def layout(self) -> tuple:
        raise NotImplementedError

    @property
    def d(self) -> int:
        return len(self.layout)

    @property
    def ground_truth(self) -> DynamicParams:
        raise NotImplementedError

    def params(self, values) -> DynamicParams:
        return DynamicParams(values, self.layout)

    # --- affine route -----------------------------------------------------

    def metric_terms(self, q):
        """Return ``M0 (N, n, n)`` and ``Mp (N, d, n, n)``."""
        raise NotImplementedError

    def metric_gradient(self, q):
        """Return ``dM0 (N, n, n, n)`` and ``dMp (N, d, n, n, n)``; axis -3 is the q index."""
        raise NotImplementedError

    def potential_gradient(self, q):
        """Return ``dV0 (N, n)`` and ``dVp (N, d, n)``."""
        q = _rows(q)
        return np.zeros(q.shape), np.zeros((len(q), self.d, self.n))

    @staticmethod
    def _lagrange_columns(M, dM, dV, qd, qdd):
        """``M q'' + (dM/dt) q' - 1/2 grad(q'^T M q') + grad V`` per parameter.

        Shapes are ``M (N, P, n, n)``, ``dM (N, P, n, n, n)``, ``dV (N, P, n)``.
        """
        Mdot = np.einsum("npkij,nk->npij", dM, qd)
        quad = np.einsum("npkij,ni,nj->npk", dM, qd, qd)
        return (np.einsum("npij,nj->npi", M, qdd) + np.einsum("npij,nj->npi", Mdot, qd)
                - 0.5 * quad + dV)

    def regressor(self, q, qd, qdd=None) -> np.ndarray:
        """Regressor stack ``(N, n, d)`` in the native chart."""
        q, qd = _rows(q), _rows(qd)
        M0, Mp = self.metric_terms(q)
        if self.model_class is ModelClass.DRAG:
            return np.einsum("npij,nj->nip", Mp, qd)
        if qdd is None:
            raise ModelError("inertia-dominated models need accelerations")
        qdd = _rows(qdd)
        _, dMp = self.metric_gradient(q)
        _, dVp = self.potential_gradient(q)
        cols = self._lagrange_columns(Mp, dMp, dVp, qd, qdd)
        return np.swapaxes(cols, 1, 2)

    def regressor_offset(self, q, qd, qdd=None) -> np.ndarray:
        """Parameter-independent part of the force (zero for the built-in mechanisms)."""
        q, qd = _rows(q), _rows(qd)
        M0, _ = self.metric_terms(q)
        if self.model_class is ModelClass.DRAG:
            return np.einsum("nij,nj->ni", M0, qd)
        qdd = _rows(qdd)
        dM0, _ = self.metric_gradient(q)
        dV0, _ = self.potential_gradient(q)
        return self._lagrange_columns(M0[:, None], dM0[:, None], dV0[:, None], qd, qdd)[:, 0]

    # --- direct route -----------------------------------------------------

    def metric(self, q, pi) -> np.ndarray:
        raise NotImplementedError

    def inverse_dynamics(self, q, qd, qdd, pi) -> np.ndarray:
        raise NotImplementedError

    def bias_forces(self, q, qd, pi) -> np.ndarray:
        """Velocity and gravity terms, i.e. inverse dynamics at zero acceleration."""
        q = _rows(q)
        return self.inverse_dynamics(q, qd, np.zeros_like(q), pi)

    # --- constraints ------------------------------------------------------

    def consistency(self, probes=None) -> list[ConsistencyConstraint]:
        raise NotImplementedError

    # --- description ------------------------------------------------------

    def describe(self) -> dict:
        fields = {f.name: _plain(getattr(self, f.name)) for f in dataclasses.fields(self)}
        return {"type": self.name, **fields}

    def default_amplitudes(self) -> np.ndarray:
        raise NotImplementedError

    def clamp(self, q) -> None:
        """Raise if a prescribed trajectory leaves the valid region."""


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    return v


# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PanTilt(Mechanism):
    """Massless link of length ``l`` carrying a point mass ``m``.

    Coordinates are pan ``theta`` and tilt ``phi``; the kinetic metric is
    ``m l^2 diag(cos^2 phi, 1)``.  With ``gravity`` enabled the potential
    ``m l g sin(phi)`` adds a second parameter ``m l``.
    """

    m: float = 0.5
    l: float = 0.3
    gravity: bool = False
    g: float = GRAVITY
    max_tilt_deg: float = 80.0

    name = "PanTilt"
    model_class = ModelClass.INERTIA
    coordinate_names = ("theta", "phi")
    units = ("rad", "rad")
    shape_coordinates = (1,)

    @property
    def layout(self):
        entries = [ParamEntry("m_l2", "rotational-inertia", "kg m^2", "mass")]
        if self.gravity:
            entries.append(ParamEntry("m_l", "first-moment", "kg m", "mass"))
        return tuple(entries)

    @property
    def ground_truth(self):
        vals = [self.m * self.l**2] + ([self.m * self.l] if self.gravity else [])
        return self.params(vals)

    def metric_terms(self, q):
        q = _rows(q)
        N = len(q)
        c = np.cos(q[:, 1])
        Mp = np.zeros((N, self.d, 2, 2))
        Mp[:, 0, 0, 0] = c**2
        Mp[:, 0, 1, 1] = 1.0
        return np.zeros((N, 2, 2)), Mp

    def metric_gradient(self, q):
        q = _rows(q)
        N = len(q)
        s, c = np.sin(q[:, 1]), np.cos(q[:, 1])
        dMp = np.zeros((N, self.d, 2, 2, 2))
        dMp[:, 0, 1, 0, 0] = -2 * c * s
        return np.zeros((N, 2, 2, 2)), dMp

    def potential_gradient(self, q):
        q = _rows(q)
        dVp = np.zeros((len(q), self.d, 2))
        if self.gravity:
            dVp[:, 1, 1] = self.g * np.cos(q[:, 1])
        return np.zeros(q.shape), dVp

    def metric(self, q, pi):
        q = _rows(q)
        c = np.cos(q[:, 1])
        M = np.zeros((len(q), 2, 2))
        M[:, 0, 0] = pi[0] * c**2
        M[:, 1, 1] = pi[0]
        return M

    def inverse_dynamics(self, q, qd, qdd, pi):
        q, qd, qdd = _rows(q), _rows(qd), _rows(qdd)
        s, c = np.sin(q[:, 1]), np.cos(q[:, 1])
        a = pi[0]
        tau = np.empty_like(q)
        tau[:, 0] = a * (c**2 * qdd[:, 0] - 2 * c * s * qd[:, 0] * qd[:, 1])
        tau[:, 1] = a * (qdd[:, 1] + c * s * qd[:, 0] ** 2)
        if self.gravity:
            tau[:, 1] += pi[1] * self.g * c
        return tau

    def consistency(self, probes=None):
        F = np.zeros((self.d, 1, 1))
        F[0] = 1.0
        return [ConsistencyConstraint((LmiBlock([[0.0]], F, "inertia m l^2 >= 0"),), "point mass")]

    def default_amplitudes(self):
        return np.deg2rad([60.0, 60.0])

    def clamp(self, q):
        q = _rows(q)
        if np.max(np.abs(q[:, 1])) > np.deg2rad(self.max_tilt_deg) + 1e-12:
            raise ModelError(f"tilt exceeds {self.max_tilt_deg} degrees; metric becomes singular")


# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TwoLinkArm(Mechanism):
    """Planar two-link arm in a vertical plane, gravity along -y.

    Per-link parameters are mass ``m``, first moments ``h = m c`` in the link
    frame and rotational inertia ``I`` about the link's joint.
    ``joint_friction`` adds viscous joint friction to the simulated forces; it
    is not part of the identified model, so a nonzero value makes the model
    class misspecified.
    """

    l1: float = 1.0
    l2: float = 0.8
    m1: float = 2.0
    c1: tuple = (0.5, 0.02)
    m2: float = 1.0
    c2: tuple = (0.4, -0.03)
    g: float = GRAVITY
    mass_bound: float = 20.0
    joint_friction: tuple = (0.0, 0.0)

    name = "TwoLinkArm"
    model_class = ModelClass.INERTIA
    coordinate_names = ("q1", "q2")
    units = ("rad", "rad")
    shape_coordinates = (0, 1)

    @property
    def layout(self):
        out = []
        for k in (1, 2):
            body = f"link{k}"
            out += [
                ParamEntry(f"m{k}", "mass", "kg", body),
                ParamEntry(f"h{k}x", "first-moment-x", "kg m", body),
                ParamEntry(f"h{k}y", "first-moment-y", "kg m", body),
                ParamEntry(f"I{k}", "rotational-inertia", "kg m^2", body),
            ]
        return tuple(out)

    @property
    def ground_truth(self):
        vals = []
        for m, c, L in ((self.m1, self.c1, self.l1), (self.m2, self.c2, self.l2)):
            c = np.asarray(c, dtype=float)
            # slender rod about its centre plus the parallel-axis shift
            vals += [m, m * c[0], m * c[1], m * L**2 / 12 + m * c @ c]
        return self.params(vals)

    def metric_terms(self, q):
        q = _rows(q)
        N, l1 = len(q), self.l1
        s2, c2 = np.sin(q[:, 1]), np.cos(q[:, 1])
        K = np.array([[2.0, 1.0], [1.0, 0.0]])
        Mp = np.zeros((N, 8, 2, 2))
        Mp[:, 3, 0, 0] = 1.0
        Mp[:, 4, 0, 0] = l1**2
        Mp[:, 5] = l1 * c2[:, None, None] * K
        Mp[:, 6] = -l1 * s2[:, None, None] * K
        Mp[:, 7] = 1.0
        return np.zeros((N, 2, 2)), Mp

    def metric_gradient(self, q):
        q = _rows(q)
        N, l1 = len(q), self.l1
        s2, c2 = np.sin(q[:, 1]), np.cos(q[:, 1])
        K = np.array([[2.0, 1.0], [1.0, 0.0]])
        dMp = np.zeros((N, 8, 2, 2, 2))
        dMp[:, 5, 1] = -l1 * s2[:, None, None] * K
        dMp[:, 6, 1] = -l1 * c2[:, None, None] * K
        return np.zeros((N, 2, 2, 2)), dMp

    def potential_gradient(self, q):
        q = _rows(q)
        g, l1 = self.g, self.l1
        s1, c1 = np.sin(q[:, 0]), np.cos(q[:, 0])
        s12, c12 = np.sin(q[:, 0] + q[:, 1]), np.cos(q[:, 0] + q[:, 1])
        dVp = np.zeros((len(q), 8, 2))
        dVp[:, 1, 0] = g * c1
        dVp[:, 2, 0] = -g * s1
        dVp[:, 4, 0] = g * l1 * c1
        dVp[:, 5, 0] = g * c12
        dVp[:, 6, 0] = -g * s12
        dVp[:, 5, 1] = g * c12
        dVp[:, 6, 1] = -g * s12
        return np.zeros(q.shape), dVp

    def _coupling(self, q, pi):
        s2, c2 = np.sin(q[:, 1]), np.cos(q[:, 1])
        a = c2 * pi[5] - s2 * pi[6]
        b = -s2 * pi[5] - c2 * pi[6]  # da/dq2
        return a, b

    def metric(self, q, pi):
        q = _rows(q)
        pi = np.asarray(pi, dtype=float)
        a, _ = self._coupling(q, pi)
        l1 = self.l1
        M = np.empty((len(q), 2, 2))
        M[:, 0, 0] = pi[3] + pi[4] * l1**2 + pi[7] + 2 * l1 * a
        M[:, 0, 1] = M[:, 1, 0] = pi[7] + l1 * a
        M[:, 1, 1] = pi[7]
        return M

    def inverse_dynamics(self, q, qd, qdd, pi):
        q, qd, qdd = _rows(q), _rows(qd), _rows(qdd)
        pi = np.asarray(pi, dtype=float)
        M = self.metric(q, pi)
        _, b = self._coupling(q, pi)
        l1, g = self.l1, self.g
        q1, q12 = q[:, 0], q[:, 0] + q[:, 1]
        grav2 = g * (np.cos(q12) * pi[5] - np.sin(q12) * pi[6])
        grav1 = g * (np.cos(q1) * (pi[1] + l1 * pi[4]) - np.sin(q1) * pi[2]) + grav2
        tau = np.einsum("nij,nj->ni", M, qdd)
        tau[:, 0] += l1 * b * (2 * qd[:, 0] * qd[:, 1] + qd[:, 1] ** 2) + grav1
        tau[:, 1] += -l1 * b * qd[:, 0] ** 2 + grav2
        return tau + qd * np.asarray(self.joint_friction, dtype=float)

    def nullspace(self) -> np.ndarray:
        """Parameter directions that never affect the dynamics (columns)."""
        v1 = np.zeros(8)
        v1[0] = 1.0
        v2 = np.zeros(8)
        v2[[3, 1, 4]] = [-self.l1**2, -self.l1, 1.0]
        return np.stack([v1, v2], axis=1)

    def consistency(self, probes=None):
        out = []
        for k, off in ((1, 0), (2, 4)):
            F = np.zeros((8, 3, 3))
            F[off + 3, 0, 0] = 1.0
            F[off + 1, 0, 1] = F[off + 1, 1, 0] = 1.0
            F[off + 2, 0, 2] = F[off + 2, 2, 0] = 1.0
            F[off, 1, 1] = F[off, 2, 2] = 1.0
            pseudo = LmiBlock(np.zeros((3, 3)), F, f"pseudo-inertia link {k}")
            Fm = np.zeros((8, 1, 1))
            Fm[off] = -1.0
            bound = LmiBlock([[self.mass_bound]], Fm, f"mass bound link {k}")
            out.append(ConsistencyConstraint((pseudo, bound), f"link {k}"))
        return out

    def default_amplitudes(self):
        return np.deg2rad([60.0, 60.0])


# ---------------------------------------------------------------------------


def _e(phi):
    return np.stack([np.cos(phi), np.sin(phi)], axis=-1)


def _nrm(phi):
    return np.stack([-np.sin(phi), np.cos(phi)], axis=-1)


@dataclasses.dataclass(frozen=True)
class DragCrawler3(Mechanism):
    """Three-link planar crawler moving through a viscous medium.

    The middle link is centred at ``(x, y)`` with heading ``theta``; the rear
    and front links hang off its ends at relative angles ``alpha1`` and
    ``alpha2``.  Each link resists the velocity of its centre with a
    longitudinal and a lateral coefficient, and each joint has a rotational
    drag.  The force balance is ``tau = M(q) qd`` with
    ``M = sum_k c_k a_k a_k^T``.

    ``rotational_drag`` resists each link's angular rate in the simulated
    forces only; it lies outside the identified model class.
    """

    lengths: tuple = (0.3, 0.3, 0.3)
    link_drag: tuple = ((1.0, 6.0), (1.2, 7.0), (0.8, 5.0))
    joint_drag: tuple = (0.05, 0.04)
    n_probes: int = 16
    rotational_drag: tuple = (0.0, 0.0, 0.0)

    name = "DragCrawler3"
    model_class = ModelClass.DRAG
    coordinate_names = ("x", "y", "theta", "alpha1", "alpha2")
    units = ("m", "m", "rad", "rad", "rad")
    shape_coordinates = (3, 4)

    @property
    def layout(self):
        out = []
        for k in (1, 2, 3):
            out += [
                ParamEntry(f"c{k}_long", "longitudinal-drag", "N s/m", f"link{k}"),
                ParamEntry(f"c{k}_lat", "lateral-drag", "N s/m", f"link{k}"),
            ]
        out += [ParamEntry(f"cj{k}", "joint-drag", "N m s/rad", f"joint{k}") for k in (1, 2)]
        return tuple(out)

    @property
    def ground_truth(self):
        vals = [c for pair in self.link_drag for c in pair] + list(self.joint_drag)
        return self.params(vals)

    def _link_frames(self, q):
        """Centre-velocity Jacobians ``(N, 3, 2, 5)`` and headings ``(N, 3)``."""
        q = _rows(q)
        N = len(q)
        L1, L2, L3 = self.lengths
        th, a1, a2 = q[:, 2], q[:, 3], q[:, 4]
        J = np.zeros((N, 3, 2, 5))
        J[:, :, 0, 0] = 1.0
        J[:, :, 1, 1] = 1.0
        # rear link: centre = p - L2/2 e(th) - L1/2 e(th + a1)
        J[:, 0, :, 2] = -0.5 * L2 * _nrm(th) - 0.5 * L1 * _nrm(th + a1)
        J[:, 0, :, 3] = -0.5 * L1 * _nrm(th + a1)
        # front link: centre = p + L2/2 e(th) + L3/2 e(th + a2)
        J[:, 2, :, 2] = 0.5 * L2 * _nrm(th) + 0.5 * L3 * _nrm(th + a2)
        J[:, 2, :, 4] = 0.5 * L3 * _nrm(th + a2)
        heading = np.stack([th + a1, th, th + a2], axis=1)
        return J, heading

    def metric_terms(self, q):
        q = _rows(q)
        N = len(q)
        J, heading = self._link_frames(q)
        rows = np.zeros((N, 8, 5))
        for k in range(3):
            rows[:, 2 * k] = np.einsum("ni,nij->nj", _e(heading[:, k]), J[:, k])
            rows[:, 2 * k + 1] = np.einsum("ni,nij->nj", _nrm(heading[:, k]), J[:, k])
        rows[:, 6, 3] = 1.0
        rows[:, 7, 4] = 1.0
        Mp = np.einsum("npi,npj->npij", rows, rows)
        return np.zeros((N, 5, 5)), Mp

    def metric(self, q, pi):
        q = _rows(q)
        pi = np.asarray(pi, dtype=float)
        J, heading = self._link_frames(q)
        M = np.zeros((len(q), 5, 5))
        for k in range(3):
            c, s = np.cos(heading[:, k]), np.sin(heading[:, k])
            R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
            C = R @ np.diag(pi[2 * k: 2 * k + 2]) @ np.swapaxes(R, 1, 2)
            M += np.swapaxes(J[:, k], 1, 2) @ C @ J[:, k]
        M[:, 3, 3] += pi[6]
        M[:, 4, 4] += pi[7]
        return M

    def unmodeled_metric(self, q) -> np.ndarray:
        """Drag matrix of the effects outside the model class."""
        q = _rows(q)
        rates = np.zeros((3, 5))
        rates[:, 2] = 1.0
        rates[0, 3] = rates[2, 4] = 1.0
        C = np.einsum("k,ki,kj->ij", np.asarray(self.rotational_drag, dtype=float), rates, rates)
        return np.broadcast_to(C, (len(q), 5, 5))

    def inverse_dynamics(self, q, qd, qdd, pi):
        M = self.metric(q, pi) + self.unmodeled_metric(q)
        return np.einsum("nij,nj->ni", M, _rows(qd))

    def probe_configurations(self) -> np.ndarray:
        """Deterministic low-discrepancy set of (theta, alpha1, alpha2) probes."""
        k = np.arange(1, self.n_probes + 1)
        golden = np.array([0.6180339887, 0.7548776662, 0.5698402910])
        u = (k[:, None] * golden) % 1.0
        q = np.zeros((self.n_probes, 5))
        q[:, 2] = np.pi * (2 * u[:, 0] - 1)
        q[:, 3:] = np.deg2rad(80.0) * (2 * u[:, 1:] - 1)
        return q

    def consistency(self, probes=None):
        probes = self.probe_configurations() if probes is None else _rows(probes)
        _, Mp = self.metric_terms(probes)
        blocks = [LmiBlock(np.zeros((5, 5)), Mp[i], f"drag matrix probe {i}") for i in range(len(probes))]
        out = [ConsistencyConstraint(tuple(blocks), "drag matrix")]
        scalars = []
        for p, e in enumerate(self.layout):
            F = np.zeros((self.d, 1, 1))
            F[p] = 1.0
            scalars.append(LmiBlock([[0.0]], F, f"{e.name} >= 0"))
        out.append(ConsistencyConstraint(tuple(scalars), "drag coefficients"))
        return out

    def default_amplitudes(self):
        return np.array([0.3, 0.3, np.deg2rad(60.0), np.deg2rad(50.0), np.deg2rad(50.0)])


MECHANISMS = {cls.name: cls for cls in (PanTilt, TwoLinkArm, DragCrawler3)}


def from_description(desc: dict) -> Mechanism:
    desc = dict(desc)
    kind = desc.pop("type", None)
    if kind not in MECHANISMS:
        raise ModelError(f"unknown mechanism {kind!r}; expected one of {sorted(MECHANISMS)}")
    cls = MECHANISMS[kind]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(desc) - set(fields)
    if unknown:
        raise ModelError(f"unknown {kind} fields: {sorted(unknown)}")
    kw = {}
    for k, v in desc.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    return cls(**kw)
