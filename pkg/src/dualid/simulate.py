"""Excitation design, noiseless inverse-dynamics simulation, noise and chart changes.

Trajectories are prescribed analytically as sums of sinusoids, so positions,
velocities and accelerations are exact; forces come from the mechanism's
closed-form inverse dynamics.  No ODE integration is involved.
"""

from __future__ import annotations

import dataclasses
from fractions import Fraction

import numpy as np

from .model import Dataset, ModelError, metric_stack, regressor_stack

MAX_HARMONIC_ORDER = 8
HARMONIC_TOL = 1e-3
RANK_RTOL = 1e-10


def _small_ratios(order: int = MAX_HARMONIC_ORDER) -> np.ndarray:
    return np.array(sorted({Fraction(p, q) for p in range(1, order + 1) for q in range(1, order + 1)}), dtype=float)


_RATIOS = _small_ratios()


def harmonic_pairs(freqs, tol: float = HARMONIC_TOL) -> list[tuple[float, float, str]]:
    """Pairs of frequencies whose ratio is within ``tol`` of ``p/q`` with ``p, q <= 8``."""
    freqs = [float(f) for f in freqs]
    bad = []
    for i in range(len(freqs)):
        for j in range(i + 1, len(freqs)):
            lo, hi = sorted((freqs[i], freqs[j]))
            r = hi / lo
            k = int(np.argmin(np.abs(_RATIOS - r)))
            if abs(_RATIOS[k] - r) <= tol:
                frac = Fraction(_RATIOS[k]).limit_denominator(MAX_HARMONIC_ORDER)
                bad.append((lo, hi, f"{frac.numerator}/{frac.denominator}"))
    return bad


def check_nonharmonic(freqs, tol: float = HARMONIC_TOL) -> None:
    bad = harmonic_pairs(freqs, tol)
    if bad:
        lo, hi, frac = bad[0]
        raise ModelError(f"frequencies {lo:g} Hz and {hi:g} Hz are harmonic (ratio ~ {frac})")


@dataclasses.dataclass(frozen=True)
class Excitation:
    """Per-coordinate sums of sinusoids ``offset + sum a sin(2 pi f t + phase)``.

    ``amplitude``, ``frequency`` and ``phase`` have shape ``(n, k)``.
    """

    amplitude: np.ndarray
    frequency: np.ndarray
    phase: np.ndarray
    duration: float = 35.0
    rate: float = 100.0
    offset: np.ndarray | None = None

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.amplitude, dtype=float))
        f = np.atleast_2d(np.asarray(self.frequency, dtype=float))
        p = np.atleast_2d(np.asarray(self.phase, dtype=float))
        if not (a.shape == f.shape == p.shape):
            raise ModelError("amplitude, frequency and phase must share a shape")
        if np.any(f <= 0):
            raise ModelError("frequencies must be positive")
        if self.duration <= 0 or self.rate <= 0:
            raise ModelError("duration and rate must be positive")
        active = f[a != 0]
        check_nonharmonic(active)
        off = np.zeros(a.shape[0]) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(-1)
        object.__setattr__(self, "amplitude", a)
        object.__setattr__(self, "frequency", f)
        object.__setattr__(self, "phase", p)
        object.__setattr__(self, "offset", off)

    @property
    def n(self) -> int:
        return self.amplitude.shape[0]

    @property
    def slowest_period(self) -> float:
        f = self.frequency[self.amplitude != 0]
        return float(1.0 / f.min()) if f.size else float(self.duration)

    def times(self) -> np.ndarray:
        return np.arange(int(round(self.duration * self.rate))) / self.rate

    def evaluate(self, t):
        t = np.asarray(t, dtype=float)[:, None, None]
        w = 2 * np.pi * self.frequency
        arg = w * t + self.phase
        a = self.amplitude
        q = self.offset + np.sum(a * np.sin(arg), axis=-1)
        qd = np.sum(a * w * np.cos(arg), axis=-1)
        qdd = -np.sum(a * w**2 * np.sin(arg), axis=-1)
        return q, qd, qdd

    def to_dict(self) -> dict:
        return {
            "amplitude": self.amplitude.tolist(),
            "frequency": self.frequency.tolist(),
            "phase": self.phase.tolist(),
            "offset": self.offset.tolist(),
            "duration": self.duration,
            "rate": self.rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Excitation":
        return cls(**d)


def random_excitation(mechanism, rng, n_sines: int = 3, f_range=(0.1, 0.6),
                      duration: float = 35.0, rate: float = 100.0, amplitudes=None) -> Excitation:
    """Draw a non-harmonic multisine excitation.

    Each coordinate gets ``n_sines`` components with log-uniform frequencies in
    ``f_range`` and equal shares of the coordinate's amplitude budget, so the
    peak excursion never exceeds the budget.
    """
    n = mechanism.n
    budget = mechanism.default_amplitudes() if amplitudes is None else np.asarray(amplitudes, dtype=float)
    lo, hi = np.log(f_range[0]), np.log(f_range[1])
    freqs: list[float] = []
    while len(freqs) < n * n_sines:
        f = float(np.round(np.exp(rng.uniform(lo, hi)), 4))
        if not harmonic_pairs(freqs + [f]):
            freqs.append(f)
    freq = np.array(freqs).reshape(n, n_sines)
    amp = np.repeat(budget[:, None] / n_sines, n_sines, axis=1)
    phase = rng.uniform(0, 2 * np.pi, size=(n, n_sines))
    return Excitation(amp, freq, phase, duration=duration, rate=rate)


def simulate_inverse(mechanism, excitation: Excitation, pi=None) -> Dataset:
    """Sample the prescribed trajectory and evaluate exact inverse dynamics."""
    if excitation.n != mechanism.n:
        raise ModelError(f"excitation has {excitation.n} coordinates, mechanism has {mechanism.n}")
    t = excitation.times()
    q, qd, qdd = excitation.evaluate(t)
    mechanism.clamp(q)
    pi = mechanism.ground_truth.values if pi is None else np.asarray(pi, dtype=float)
    tau = mechanism.inverse_dynamics(q, qd, qdd, pi)
    return Dataset(
        t=t, q=q, qd=qd, qdd=qdd, tau=tau, dt=1.0 / excitation.rate,
        coordinate_names=mechanism.coordinate_names, units=mechanism.units,
        meta={"slowest_period": excitation.slowest_period, "excitation": excitation.to_dict(),
              "noise": None},
    )


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise model.

    Parameters
    ----------
    tau_cov : (n, n) array_like or None
        Covariance of additive force noise in the dataset's chart.
    ambient_scale : float
        Standard deviation of force noise that is isotropic in the ambient
        mechanical space.  Pulled back to coordinates it has covariance
        ``ambient_scale**2 * M(pi*, q)``, so it needs the mechanism.
    q_std, qd_std, qdd_std : float or (n,) array_like
        Per-channel kinematic noise.
    seed : int
    """

    tau_cov: np.ndarray | None = None
    ambient_scale: float = 0.0
    q_std: object = 0.0
    qd_std: object = 0.0
    qdd_std: object = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.tau_cov is not None:
            C = np.atleast_2d(np.asarray(self.tau_cov, dtype=float))
            if C.shape[0] != C.shape[1] or not np.allclose(C, C.T):
                raise ModelError("tau_cov must be a symmetric square matrix")
            if np.linalg.eigvalsh(C)[0] < -1e-12 * max(1.0, np.abs(C).max()):
                raise ModelError("tau_cov must be positive semidefinite")
            object.__setattr__(self, "tau_cov", 0.5 * (C + C.T))
        if self.ambient_scale < 0:
            raise ModelError("ambient_scale must be nonnegative")

    @classmethod
    def anisotropic(cls, stds, **kw) -> "NoiseSpec":
        return cls(tau_cov=np.diag(np.asarray(stds, dtype=float) ** 2), **kw)

    def to_dict(self) -> dict:
        as_list = lambda v: np.asarray(v, dtype=float).tolist()
        return {
            "tau_cov": None if self.tau_cov is None else self.tau_cov.tolist(),
            "ambient_scale": self.ambient_scale,
            "q_std": as_list(self.q_std), "qd_std": as_list(self.qd_std), "qdd_std": as_list(self.qdd_std),
            "seed": self.seed,
        }


def _psd_sqrt(C):
    w, V = np.linalg.eigh(C)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def add_noise(dataset: Dataset, noise: NoiseSpec, mechanism=None) -> Dataset:
    """Return a noisy copy; deterministic for a fixed seed."""
    rng = np.random.default_rng(noise.seed)
    N, n = len(dataset), dataset.n
    # draw every channel unconditionally so one channel's std never shifts another's stream
    w_tau = rng.standard_normal((N, n))
    w_amb = rng.standard_normal((N, n))
    w_kin = rng.standard_normal((3, N, n))
    tau = dataset.tau.copy()
    if noise.tau_cov is not None:
        if noise.tau_cov.shape != (n, n):
            raise ModelError(f"tau_cov must be {n}x{n}")
        if np.any(noise.tau_cov):
            tau = tau + w_tau @ _psd_sqrt(noise.tau_cov).T
    if noise.ambient_scale > 0:
        if mechanism is None:
            raise ModelError("ambient noise needs the mechanism")
        M0, Mp = metric_stack(mechanism, dataset.q, dataset.chart)
        M = M0 + np.einsum("p,npij->nij", mechanism.ground_truth.values, Mp)
        w, V = np.linalg.eigh(M)
        root = np.einsum("nij,nj,nkj->nik", V, np.sqrt(np.clip(w, 0, None)), V)
        tau = tau + noise.ambient_scale * np.einsum("nij,nj->ni", root, w_amb)
    out = {}
    for k, (name, std) in enumerate((("q", noise.q_std), ("qd", noise.qd_std), ("qdd", noise.qdd_std))):
        v = getattr(dataset, name)
        std = np.broadcast_to(np.asarray(std, dtype=float), (n,))
        out[name] = v if v is None or not np.any(std) else v + w_kin[k] * std
    meta = dict(dataset.meta)
    meta["noise"] = noise.to_dict()
    return dataclasses.replace(dataset, tau=tau, meta=meta, **out)


def rescale_chart(dataset: Dataset, D, chart_id: str | None = None) -> Dataset:
    """Express a dataset in the chart ``q' = D q``.

    Velocities and accelerations transform like ``q``; forces are covectors
    and transform with ``D^{-T}``.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if D.ndim == 2 and D.shape[0] == 1 and dataset.n > 1:
        D = np.diag(D[0])
    if D.shape != (dataset.n, dataset.n):
        raise ModelError(f"chart map must be {dataset.n}x{dataset.n}")
    cond = np.linalg.cond(D)
    if not np.isfinite(cond) or cond > 1e14:
        raise ModelError(f"chart map is singular (condition number {cond:.3e})")
    Dinv = np.linalg.inv(D)
    meta = dict(dataset.meta)
    meta["chart_condition"] = float(cond)
    return dataclasses.replace(
        dataset,
        q=dataset.q @ D.T,
        qd=dataset.qd @ D.T,
        qdd=None if dataset.qdd is None else dataset.qdd @ D.T,
        tau=dataset.tau @ Dinv,
        chart=D @ dataset.chart,
        chart_id=chart_id or f"{dataset.chart_id}*D",
        meta=meta,
    )


def stacked_rank(mechanism, dataset: Dataset, rtol: float = RANK_RTOL) -> int:
    Y = regressor_stack(mechanism, dataset.q, dataset.qd, dataset.qdd, dataset.chart)
    s = np.linalg.svd(Y.reshape(-1, Y.shape[-1]), compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0


def downsample(dataset: Dataset, target_count: int, mechanism, policy: str = "uniform",
               seed: int = 0, max_retries: int = 100) -> Dataset:
    """Reduce a dataset to ``target_count`` samples without losing regressor rank.

    ``uniform`` first tries evenly spaced samples, then random phase offsets of
    the same grid; ``seeded-random`` draws sorted subsets.  Each retry uses a
    fresh generator derived from ``seed``.
    """
    N = len(dataset)
    if target_count < mechanism.d:
        raise ModelError(f"target_count {target_count} is below the parameter count {mechanism.d}")
    if target_count >= N:
        return dataset
    if policy not in ("uniform", "seeded-random"):
        raise ModelError(f"unknown downsample policy {policy!r}")
    full_rank = stacked_rank(mechanism, dataset)
    seeds = np.random.SeedSequence(seed).spawn(max_retries)
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng(seeds[attempt - 1]) if attempt else None
        if policy == "uniform":
            shift = 0.0 if rng is None else rng.uniform(0, 1)
            idx = np.floor((np.arange(target_count) + shift) * N / target_count).astype(int)
            idx = np.unique(np.clip(idx, 0, N - 1))
        else:
            rng = rng or np.random.default_rng(seed)
            idx = np.sort(rng.choice(N, size=target_count, replace=False))
        sub = dataset.subset(idx)
        if stacked_rank(mechanism, sub) == full_rank:
            meta = dict(sub.meta)
            meta["downsample"] = {"target": target_count, "policy": policy, "seed": seed, "attempts": attempt + 1}
            return dataclasses.replace(sub, meta=meta)
    raise ModelError(f"could not preserve regressor rank {full_rank} with {target_count} samples")
