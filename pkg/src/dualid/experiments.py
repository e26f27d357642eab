"""End-to-end experiment pipelines and the named reproduction profiles.

A run simulates training and test trajectories, corrupts and re-charts them,
fits every requested estimator on the training regression, predicts the test
trajectories and collects the checks that can be decided from a single seed.
Multi-seed trend studies are built on top with :func:`trend_study`.
"""

from __future__ import annotations

import copy
import dataclasses
import time

import jsonschema
import numpy as np

from .estimators import ALL_KINDS, EstimatorKind, EstimatorSpec, build_regression, fit
from .evaluate import evaluate_estimate, identifiable_projection, invariance_probe
from .mechanisms import from_description
from .model import ModelError, concatenate, dual_norm_sq
from .simulate import Excitation, NoiseSpec, add_noise, downsample, random_excitation, rescale_chart, simulate_inverse

PROFILES = ("inertia-low", "inertia-high", "drag-low", "drag-high", "invariance")
BASELINES = tuple(k.value for k in ALL_KINDS if k is not EstimatorKind.DUAL_METRIC)

TIGHTNESS_TOL = 1e-6
CONSISTENCY_TOL = 1e-8
INVARIANCE_TOL = 1e-6
WITNESS_THRESHOLD = 1e-2
PROFILE_TIME_LIMIT = 60.0

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mechanism"],
    "properties": {
        "mechanism": {"type": "object", "required": ["type"]},
        "excitation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_train": _posint,
                "n_test": _posint,
                "n_sines": _posint,
                "f_range": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "frequencies": {"type": "array", "items": {"type": "array", "items": _pos}},
                "duration": _pos,
                "rate": _pos,
                "train_stride": _posint,
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau_relative": {"type": "number", "minimum": 0},
                "anisotropy": {"type": "number", "minimum": 1},
                "tau_stds": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "ambient_scale": {"type": "number", "minimum": 0},
                "q_std": {"type": "number", "minimum": 0},
                "qd_std": {"type": "number", "minimum": 0},
                "qdd_std": {"type": "number", "minimum": 0},
                "noisy_test": {"type": "boolean"},
            },
        },
        "chart": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": _num},
                {"type": "array", "items": {"type": "array", "items": _num}},
            ]
        },
        "estimators": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": [k.value for k in ALL_KINDS]},
                    "enforce_consistency": {"type": "boolean"},
                    "rho": {"oneOf": [{"type": "null"}, _pos]},
                },
            },
        },
        "downsample": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"oneOf": [{"type": "null"}, _posint]},
                "policy": {"enum": ["uniform", "seeded-random"]},
            },
        },
        "nominal_spread": {"type": "number", "minimum": 0},
        "probes": {"enum": ["data", "default"]},
        "invariance_maps": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
    },
}


@dataclasses.dataclass
class ExperimentConfig:
    """Everything needed to regenerate one experiment from a seed.

    ``noise.tau_relative`` scales per-coordinate force noise to the RMS of the
    clean training forces; ``noise.anisotropy`` spreads the standard
    deviations linearly from ``1/anisotropy`` to ``1`` across coordinates.
    ``chart`` is the chart map ``D`` (diagonal entries or a full matrix)
    applied to training and test data after the noise.
    """

    mechanism: dict
    excitation: dict = dataclasses.field(default_factory=dict)
    noise: dict = dataclasses.field(default_factory=dict)
    chart: object = None
    estimators: list = dataclasses.field(default_factory=lambda: [{"kind": k.value} for k in ALL_KINDS])
    downsample: dict = dataclasses.field(default_factory=dict)
    nominal_spread: float = 0.3
    probes: str = "data"
    invariance_maps: int = 0
    seed: int = 0

    def __post_init__(self):
        ex = {"n_train": 6, "n_test": 6, "n_sines": 3, "f_range": [0.1, 0.6], "duration": 35.0,
              "rate": 100.0, "train_stride": 50}
        ex.update(self.excitation)
        self.excitation = ex
        nz = {"tau_relative": 0.0, "anisotropy": 1.0, "ambient_scale": 0.0, "q_std": 0.0, "qd_std": 0.0,
              "qdd_std": 0.0, "noisy_test": True}
        nz.update(self.noise)
        self.noise = nz
        ds = {"samples": None, "policy": "uniform"}
        ds.update(self.downsample)
        self.downsample = ds

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(map(str, e.absolute_path)) or "<root>"
            raise ModelError(f"invalid config at {where}: {e.message}") from None
        cfg = cls(**copy.deepcopy(d))
        cfg.build_mechanism()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(dataclasses.asdict(self))

    def build_mechanism(self):
        return from_description(self.mechanism)

    def chart_matrix(self, n: int):
        if self.chart is None:
            return None
        D = np.asarray(self.chart, dtype=float)
        return np.diag(D) if D.ndim == 1 else D

    def specs(self, nominal) -> list[EstimatorSpec]:
        out = []
        for e in self.estimators:
            kind = EstimatorKind(e["kind"])
            regularized = kind in (EstimatorKind.REG_BREGMAN, EstimatorKind.REG_PULLBACK)
            out.append(EstimatorSpec(kind, rho=e.get("rho"), nominal=nominal if regularized else None,
                                     enforce_consistency=e.get("enforce_consistency", True)))
        return out


def _headline(mech: dict, samples=None, n=2) -> dict:
    return {
        "mechanism": mech,
        "noise": {"tau_relative": 0.05, "anisotropy": 10.0},
        "chart": [1000.0] + [1.0] * (n - 1),
        "downsample": {"samples": samples, "policy": "uniform"},
    }


def profile_config(profile: str, seed: int = 0) -> ExperimentConfig:
    """The configuration behind a named reproduction profile."""
    arm, crawler = {"type": "TwoLinkArm"}, {"type": "DragCrawler3"}
    table = {
        "inertia-low": _headline(arm, 20, 2),
        "inertia-high": _headline(arm, None, 2),
        "drag-low": _headline(crawler, 40, 5),
        "drag-high": _headline(crawler, None, 5),
        "invariance": {
            "mechanism": {"type": "PanTilt"},
            "noise": {"tau_relative": 2.0, "anisotropy": 10.0},
            "downsample": {"samples": 20, "policy": "uniform"},
            "estimators": [{"kind": "DualMetric"}, {"kind": "OLS"}],
            "invariance_maps": 10,
        },
    }
    if profile not in table:
        raise ModelError(f"unknown profile {profile!r}; expected one of {list(PROFILES)}")
    d = table[profile]
    d["seed"] = int(seed)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# generation


@dataclasses.dataclass
class Generated:
    """Simulated data for one seed, all in the experiment chart."""

    mechanism: object
    train_full: list
    train: object
    test: list
    noise_stds: np.ndarray
    chart: np.ndarray | None


def _seeds(seed: int):
    root = np.random.SeedSequence(int(seed))
    keys = ("excitation", "train_noise", "test_noise", "downsample", "nominal", "maps")
    return dict(zip(keys, root.spawn(len(keys))))


def _excitations(cfg: ExperimentConfig, mech, seq, count):
    ex = cfg.excitation
    if ex.get("frequencies") is not None:
        freq = np.asarray(ex["frequencies"], dtype=float)
        if freq.ndim != 2 or freq.shape[0] != mech.n:
            raise ModelError(f"excitation.frequencies needs one row per coordinate ({mech.n})")
        amp = np.repeat(mech.default_amplitudes()[:, None] / freq.shape[1], freq.shape[1], axis=1)
        return [Excitation(amp, freq, np.random.default_rng(s).uniform(0, 2 * np.pi, freq.shape),
                           duration=ex["duration"], rate=ex["rate"]) for s in seq.spawn(count)]
    return [random_excitation(mech, np.random.default_rng(s), n_sines=ex["n_sines"], f_range=tuple(ex["f_range"]),
                              duration=ex["duration"], rate=ex["rate"]) for s in seq.spawn(count)]


def generate(cfg: ExperimentConfig) -> Generated:
    """Simulate, corrupt, decimate and re-chart the data for ``cfg.seed``."""
    mech = cfg.build_mechanism()
    seeds = _seeds(cfg.seed)
    ex = cfg.excitation
    excitations = _excitations(cfg, mech, seeds["excitation"], ex["n_train"] + ex["n_test"])
    clean = [simulate_inverse(mech, e) for e in excitations]
    train_clean, test_clean = clean[: ex["n_train"]], clean[ex["n_train"]:]
    stride = ex["train_stride"]
    decimated = [d.subset(np.arange(0, len(d), stride)) for d in train_clean]

    nz = cfg.noise
    if "tau_stds" in nz:
        stds = np.asarray(nz["tau_stds"], dtype=float)
        if stds.shape != (mech.n,):
            raise ModelError(f"noise.tau_stds needs {mech.n} entries")
    else:
        rms = np.sqrt(np.mean(concatenate(decimated).tau ** 2, axis=0))
        stds = nz["tau_relative"] * rms * np.linspace(1.0 / nz["anisotropy"], 1.0, mech.n)

    def noise(seq):
        return NoiseSpec.anisotropic(stds, ambient_scale=nz["ambient_scale"], q_std=nz["q_std"],
                                     qd_std=nz["qd_std"], qdd_std=nz["qdd_std"],
                                     seed=int(seq.generate_state(1)[0]))

    train = [add_noise(d, noise(s), mech) for d, s in zip(decimated, seeds["train_noise"].spawn(len(decimated)))]
    if nz["noisy_test"]:
        test = [add_noise(d, noise(s), mech) for d, s in zip(test_clean, seeds["test_noise"].spawn(len(test_clean)))]
    else:
        test = list(test_clean)
    D = cfg.chart_matrix(mech.n)
    if D is not None:
        train = [rescale_chart(d, D, chart_id="D") for d in train]
        test = [rescale_chart(d, D, chart_id="D") for d in test]
    return Generated(mech, train, prepare_training(cfg, mech, train), test, stds, D)


def prepare_training(cfg: ExperimentConfig, mech, train_sets):
    """Concatenate the training trajectories and apply the configured downsampling."""
    train = concatenate(list(train_sets))
    samples = cfg.downsample["samples"]
    if samples is not None:
        train = downsample(train, samples, mech, policy=cfg.downsample["policy"],
                           seed=int(_seeds(cfg.seed)["downsample"].generate_state(1)[0]))
    return train


def perturbed_nominal(mech, reg, spread: float, seq) -> np.ndarray:
    """Ground truth scaled by log-normal factors, pulled back toward the truth until strictly feasible."""
    rng = np.random.default_rng(seq)
    truth = mech.ground_truth.values
    draw = truth * np.exp(spread * rng.standard_normal(len(truth)))

    def inside(v):
        cons = all(b.min_eig(v) > b.margin + 1e-9 for c in reg.constraints for b in c.blocks)
        return cons and all(b.min_eig(v) > 0 for b in reg.prior_blocks)

    t = 1.0
    for _ in range(60):
        v = truth + t * (draw - truth)
        if inside(v):
            return v
        t *= 0.5
    return truth.copy()


# ---------------------------------------------------------------------------
# checks


@dataclasses.dataclass
class Check:
    """A pass/fail statement.  ``asserted`` checks decide the exit status."""

    name: str
    passed: bool
    detail: str
    asserted: bool = True

    def line(self) -> str:
        tag = ("PASS" if self.passed else "FAIL") if self.asserted else "INFO"
        return f"[{tag}] {self.name}: {self.detail}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def tightness_gap(reg, report) -> float:
    """Largest ``|s_i - r_i^T M_i^-1 r_i| / max(1, s_i)`` over the samples."""
    s = np.asarray(report.slacks, dtype=float)
    x = report.pi_hat.values
    r = reg.residuals(x)
    M = reg.metrics(x)
    exact = np.array([dual_norm_sq(M[i], r[i]) for i in range(reg.N)])
    return float(np.max(np.abs(s - exact) / np.maximum(1.0, s)))


def consistency_margin(reg, pi) -> float:
    """Smallest eigenvalue over all consistency blocks (``+inf`` without constraints)."""
    eigs = [b.min_eig(pi) for c in reg.constraints for b in c.blocks]
    return float(min(eigs)) if eigs else float("inf")


def random_chart_maps(n: int, count: int, seq) -> list[np.ndarray]:
    """``diag(1000, 1, ...)`` followed by random well-conditioned invertible maps."""
    if count <= 0:
        return []
    rng = np.random.default_rng(seq)
    maps = [np.diag([1000.0] + [1.0] * (n - 1))]
    while len(maps) < count:
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        D = Q @ np.diag(np.exp(rng.uniform(-3, 3, n))) @ np.linalg.qr(rng.standard_normal((n, n)))[0]
        if np.linalg.cond(D) < 1e6:
            maps.append(D)
    return maps


# ---------------------------------------------------------------------------
# running


@dataclasses.dataclass
class RunResult:
    config: ExperimentConfig
    generated: Generated
    regression: object
    reports: dict
    evaluations: dict
    invariance: list
    checks: list
    timings: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.asserted)

    def shape_ncc(self) -> dict:
        coords = self.generated.mechanism.shape_coordinates
        return {k: ev.mean_over(coords) for k, ev in self.evaluations.items()}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def run(cfg: ExperimentConfig, evaluate: bool = True) -> RunResult:
    """Simulate, identify with every configured estimator, evaluate and check."""
    timings = {}
    t0 = time.perf_counter()
    try:
        gen = generate(cfg)
    except Exception as e:
        raise StageError("simulate", e) from e
    timings["simulate"] = time.perf_counter() - t0
    mech = gen.mechanism
    seeds = _seeds(cfg.seed)

    t1 = time.perf_counter()
    try:
        reg = build_regression(mech, gen.train, probes=cfg.probes)
        nominal = perturbed_nominal(mech, reg, cfg.nominal_spread, seeds["nominal"])
        reports = {}
        for spec in cfg.specs(nominal):
            reports[spec.kind.value] = fit(reg, spec)
    except Exception as e:
        raise StageError("identify", e) from e
    timings["identify"] = time.perf_counter() - t1

    P = identifiable_projection(reg)
    evaluations = {}
    t2 = time.perf_counter()
    if evaluate:
        try:
            for k, rep in reports.items():
                evaluations[k] = evaluate_estimate(mech, k, rep.pi_hat, gen.test, truth=mech.ground_truth, projector=P)
        except Exception as e:
            raise StageError("evaluate", e) from e
    timings["evaluate"] = time.perf_counter() - t2

    invariance = []
    maps = random_chart_maps(mech.n, cfg.invariance_maps, seeds["maps"])
    if maps:
        try:
            for spec in cfg.specs(nominal):
                if spec.kind in (EstimatorKind.DUAL_METRIC, EstimatorKind.OLS):
                    invariance += invariance_probe(reg, spec, maps, projector=P)
        except Exception as e:
            raise StageError("invariance", e) from e
    timings["total"] = time.perf_counter() - t0
    result = RunResult(cfg, gen, reg, reports, evaluations, invariance, [], timings)
    result.checks = acceptance_checks(result)
    return result


def acceptance_checks(res: RunResult) -> list[Check]:
    """Checks decidable from a single run."""
    checks = []
    reg, reports = res.regression, res.reports
    dm = reports.get(EstimatorKind.DUAL_METRIC.value)
    if dm is not None:
        gap = tightness_gap(reg, dm)
        checks.append(Check("schur-tightness", gap <= TIGHTNESS_TOL,
                            f"max |s - r^T M^-1 r| / max(1, s) = {gap:.2e} (limit {TIGHTNESS_TOL:g}, N = {reg.N})"))
    elapsed = res.timings["total"]
    checks.append(Check("runtime", elapsed < PROFILE_TIME_LIMIT,
                        f"{elapsed:.1f} s (limit {PROFILE_TIME_LIMIT:g} s)"))
    not_ok = [k for k, r in reports.items() if not r.ok]
    checks.append(Check("solver-status", not not_ok,
                        "all Optimal" if not not_ok else f"not Optimal: {', '.join(not_ok)}"))
    margins = {k: consistency_margin(reg, r.pi_hat.values) for k, r in reports.items()
               if any(e.get("enforce_consistency", True) for e in res.config.estimators if e["kind"] == k)}
    if margins and reg.constraints:
        worst = min(margins, key=margins.get)
        checks.append(Check("physical-consistency", margins[worst] >= -CONSISTENCY_TOL,
                            f"smallest constraint eigenvalue {margins[worst]:.2e} ({worst})"))
    rows = res.invariance
    dm_rows = [r for r in rows if r["estimator"] == EstimatorKind.DUAL_METRIC.value]
    if dm_rows:
        worst = max(r["pi_shift"] for r in dm_rows)
        checks.append(Check("dual-metric-invariance", worst <= INVARIANCE_TOL,
                            f"max relative parameter shift {worst:.2e} over {len(dm_rows)} chart maps"))
    ols_rows = [r for r in rows if r["estimator"] == EstimatorKind.OLS.value]
    if ols_rows:
        shift = ols_rows[0]["pi_shift"]
        checks.append(Check("ols-chart-dependence", shift > WITNESS_THRESHOLD,
                            f"relative parameter shift {shift:.2e} under diag(1000, 1, ...)", asserted=False))
    if res.evaluations and dm is not None and res.config.invariance_maps == 0:
        ncc = res.shape_ncc()
        dmv = ncc[EstimatorKind.DUAL_METRIC.value]
        beaten = [k for k, v in ncc.items() if v > dmv]
        detail = f"dual-metric shape NCC {dmv:.5f}; " + ", ".join(f"{k} {v:.5f}" for k, v in ncc.items() if k != "DualMetric")
        checks.append(Check("trend-ordering (this seed)", not beaten, detail, asserted=False))
    return checks


def trend_study(profile: str, seeds, progress=None) -> dict:
    """Per-seed shape-coordinate NCC for every estimator over ``seeds``.

    Returns the NCC table, the per-baseline count of seeds on which the
    dual-metric estimate is at least as good, and the count of seeds on which
    it is at least as good as every baseline at once.
    """
    table = {}
    for s in seeds:
        res = run(profile_config(profile, s))
        for k, v in res.shape_ncc().items():
            table.setdefault(k, []).append(v)
        if progress:
            progress(s, res)
    dm = np.array(table[EstimatorKind.DUAL_METRIC.value])
    wins = {k: int(np.sum(dm >= np.array(v))) for k, v in table.items() if k != EstimatorKind.DUAL_METRIC.value}
    joint = int(np.sum(np.all([dm >= np.array(v) for k, v in table.items() if k in wins], axis=0)))
    return {"profile": profile, "seeds": list(seeds), "ncc": table,
            "mean": {k: float(np.mean(v)) for k, v in table.items()}, "wins": wins, "joint_wins": joint}


def recovery_study(mechanism: dict, levels=(1e-2, 1e-4, 1e-6), seed: int = 0,
                   kinds=("DualMetric", "OLS", "WLS")) -> dict:
    """Identifiable-projected parameter error as isotropic force noise shrinks.

    Uses the full decimated training set in the headline chart.  Returns
    ``{kind: [error at each level]}`` with errors ``|P (pi_hat - pi*)|``.
    """
    mech = from_description(mechanism)
    out = {k: [] for k in kinds}
    for std in levels:
        cfg = ExperimentConfig.from_dict({
            "mechanism": mechanism,
            "noise": {"tau_stds": [float(std)] * mech.n},
            "chart": [1000.0] + [1.0] * (mech.n - 1),
            "estimators": [{"kind": k} for k in kinds],
            "seed": int(seed),
        })
        res = run(cfg, evaluate=False)
        P = identifiable_projection(res.regression)
        truth = mech.ground_truth.values
        for k in kinds:
            out[k].append(float(np.linalg.norm(P @ (res.reports[k].pi_hat.values - truth))))
    return out
