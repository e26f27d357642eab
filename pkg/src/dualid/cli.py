"""Command-line front end.

::

    dualid simulate  --config exp.json --out data/
    dualid identify  --config exp.json --out fits/ data/train_*.csv
    dualid evaluate  --out eval/ fits/*.json data/test_*.csv
    dualid reproduce --profile drag-low --seed 3 --out run/

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 failed acceptance check.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .estimators import ALL_KINDS, EstimatorError, EstimatorReport, EstimatorSpec, build_regression, fit
from .evaluate import evaluate_estimate, identifiable_projection, reports_to_csv
from .mechanisms import from_description
from .model import Dataset, DynamicParams, ModelError

log = logging.getLogger("dualid")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4
SIDECAR = "ground_truth.json"
MANIFEST = "manifest.json"
OUT_ENV = "DUALID_OUT"


class CliError(Exception):
    def __init__(self, msg, code=EXIT_INVALID):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# file formats


def csv_header(n: int) -> list[str]:
    return (["t"] + [f"q_{i}" for i in range(1, n + 1)] + [f"qd_{i}" for i in range(1, n + 1)]
            + [f"qdd_{i}" for i in range(1, n + 1)] + [f"tau_{i}" for i in range(1, n + 1)])


def write_dataset(path, ds: Dataset) -> None:
    """One row per sample, header ``t,q_1..q_n,qd_1..qd_n,qdd_1..qdd_n,tau_1..tau_n``."""
    qdd = ds.qdd if ds.qdd is not None else np.full_like(ds.q, np.nan)
    data = np.column_stack([ds.t, ds.q, ds.qd, qdd, ds.tau])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(csv_header(ds.n)) + "\n")
        for row in data:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def read_dataset(path, info: dict | None = None) -> Dataset:
    """Parse a dataset file; ``info`` carries chart, time step and metadata from the sidecar."""
    info = info or {}
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise CliError(f"{path}: empty file")
    header = rows[0]
    if (len(header) - 1) % 4 or len(header) < 5:
        raise CliError(f"{path}: malformed header")
    n = (len(header) - 1) // 4
    if header != csv_header(n):
        raise CliError(f"{path}: header does not match t,q_1..q_n,qd_1..qd_n,qdd_1..qdd_n,tau_1..tau_n")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as e:
        raise CliError(f"{path}: {e}") from None
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != 4 * n + 1:
        raise CliError(f"{path}: no samples or ragged rows")
    qdd = data[:, 1 + 2 * n: 1 + 3 * n]
    chart = info.get("chart")
    try:
        return Dataset(
            t=data[:, 0], q=data[:, 1: 1 + n], qd=data[:, 1 + n: 1 + 2 * n],
            qdd=None if np.all(np.isnan(qdd)) else qdd, tau=data[:, 1 + 3 * n:],
            dt=float(info.get("dt", np.median(np.diff(data[:, 0])) if len(data) > 1 else 0.0)),
            chart_id=info.get("chart_id", "native"), chart=None if chart is None else np.asarray(chart),
            coordinate_names=tuple(info.get("coordinate_names", ())), units=tuple(info.get("units", ())),
            meta={"slowest_period": info.get("slowest_period")},
        )
    except ModelError as e:
        raise CliError(f"{path}: {e}") from None


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"{path}: {e}") from None


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, files, command: str, extra=None) -> dict:
    """Content hashes of every artifact; the timestamp lives only here."""
    entries = {str(Path(f).relative_to(out)): sha256(f) for f in sorted(map(Path, files))}
    manifest = {"command": command, "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "artifacts": entries}
    if extra:
        manifest.update(extra)
    write_json(out / MANIFEST, manifest)
    return manifest


def _outdir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise CliError("an output directory is required (--out or DUALID_OUT)")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise CliError(f"output directory {out} is not writable: {e}") from None
    return out


def load_config(args) -> experiments.ExperimentConfig:
    if args.config is None:
        raise CliError("--config is required")
    raw = read_json(args.config)
    if args.seed is not None:
        raw = dict(raw, seed=args.seed)
    if getattr(args, "estimators", None):
        raw = dict(raw, estimators=[{"kind": k} for k in _estimator_list(args.estimators)])
    try:
        return experiments.ExperimentConfig.from_dict(raw)
    except ModelError as e:
        raise CliError(str(e)) from None


def _estimator_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    valid = [k.value for k in ALL_KINDS]
    bad = [s for s in names if s not in valid]
    if bad or not names:
        raise CliError(f"unknown estimator(s) {bad or text!r}; choose from {','.join(valid)}")
    return names


def _sidecar(cfg, gen) -> dict:
    mech = gen.mechanism
    return {
        "mechanism": mech.describe(),
        "layout": [e.name for e in mech.layout],
        "pi_star": mech.ground_truth.to_dict(),
        "chart": None if gen.chart is None else np.asarray(gen.chart).tolist(),
        "noise_tau_stds": gen.noise_stds.tolist(),
        "config": cfg.to_dict(),
        "files": {},
    }


def _file_info(ds: Dataset) -> dict:
    return {"dt": ds.dt, "chart_id": ds.chart_id, "chart": np.asarray(ds.chart).tolist(),
            "slowest_period": ds.meta.get("slowest_period"), "coordinate_names": list(ds.coordinate_names),
            "units": list(ds.units)}


def write_datasets(out: Path, cfg, gen) -> list[Path]:
    side = _sidecar(cfg, gen)
    files = []
    for prefix, sets in (("train", gen.train_full), ("test", gen.test)):
        for i, ds in enumerate(sets):
            p = out / f"{prefix}_{i:02d}.csv"
            write_dataset(p, ds)
            side["files"][p.name] = _file_info(ds)
            files.append(p)
    write_json(out / SIDECAR, side)
    return files + [out / SIDECAR]


def _load_with_sidecar(paths, sidecar=None):
    paths = [Path(p) for p in paths]
    if not paths:
        raise CliError("no dataset files given")
    side_path = Path(sidecar) if sidecar else paths[0].parent / SIDECAR
    side = read_json(side_path) if side_path.exists() else None
    sets = []
    for p in paths:
        info = (side or {}).get("files", {}).get(p.name, {})
        sets.append(read_dataset(p, info))
    return sets, side


def _mechanism(cfg, side):
    if cfg is not None:
        return cfg.build_mechanism()
    if side is None:
        raise CliError("no mechanism: pass --config or keep the ground-truth sidecar next to the datasets")
    try:
        return from_description(side["mechanism"])
    except ModelError as e:
        raise CliError(str(e)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    out = _outdir(args)
    try:
        gen = experiments.generate(cfg)
    except ModelError as e:
        raise CliError(f"simulate: {e}") from None
    files = write_datasets(out, cfg, gen)
    write_manifest(out, files, "simulate")
    print(f"wrote {len(gen.train_full)} training and {len(gen.test)} test trajectories to {out}")
    return EXIT_OK


def _fit_all(cfg, mech, train):
    reg = build_regression(mech, train, probes=cfg.probes)
    nominal = experiments.perturbed_nominal(mech, reg, cfg.nominal_spread, experiments._seeds(cfg.seed)["nominal"])
    reports = {}
    for spec in cfg.specs(nominal):
        try:
            reports[spec.kind.value] = fit(reg, spec)
        except EstimatorError as e:
            raise CliError(f"{spec.kind.value}: {e}", EXIT_SOLVER) from None
    return reg, reports


def write_reports(out: Path, reports: dict) -> list[Path]:
    files = []
    for k, rep in reports.items():
        p = out / f"report_{k}.json"
        write_json(p, rep.to_dict())
        files.append(p)
    return files


def cmd_identify(args) -> int:
    cfg = load_config(args)
    out = _outdir(args)
    sets, side = _load_with_sidecar(args.paths, args.sidecar)
    mech = _mechanism(cfg, side)
    if side is not None and side.get("layout") != [e.name for e in mech.layout]:
        raise CliError("dataset layout does not match the configured mechanism")
    try:
        train = experiments.prepare_training(cfg, mech, sets)
        reg, reports = _fit_all(cfg, mech, train)
    except ModelError as e:
        raise CliError(f"identify: {e}") from None
    files = write_reports(out, reports)
    write_manifest(out, files, "identify")
    bad = [k for k, r in reports.items() if not r.ok]
    for k, r in reports.items():
        print(f"{k:12s} {r.solver.get('status'):18s} objective {r.objective:.6g}")
    if bad:
        print(f"solver did not reach Optimal for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def summary_table(evals: dict) -> str:
    """Estimator x coordinate table of mean +- std NCC across test trajectories."""
    names = next(iter(evals.values())).coordinate_names
    lines = ["estimator," + ",".join(f"{c}_mean,{c}_std" for c in names)]
    for k, ev in evals.items():
        cells = [f"{m!r},{s!r}" for m, s in zip(ev.ncc_mean.tolist(), ev.ncc_std.tolist())]
        lines.append(k + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def write_evaluations(out: Path, evals: dict) -> list[Path]:
    (out / "evaluation.json").write_text(dumps({k: v.to_dict() for k, v in evals.items()}), encoding="utf-8")
    (out / "evaluation.csv").write_text(reports_to_csv(evals.values()), encoding="utf-8")
    (out / "summary.csv").write_text(summary_table(evals), encoding="utf-8")
    return [out / "evaluation.json", out / "evaluation.csv", out / "summary.csv"]


def cmd_evaluate(args) -> int:
    out = _outdir(args)
    report_paths = [p for p in args.paths if p.endswith(".json")]
    data_paths = [p for p in args.paths if not p.endswith(".json")]
    if not report_paths:
        raise CliError("no estimator reports given")
    if not data_paths:
        raise CliError("empty test set: no dataset files given")
    sets, side = _load_with_sidecar(data_paths, args.sidecar)
    cfg = load_config(args) if args.config else None
    mech = _mechanism(cfg, side)
    layout = [e.name for e in mech.layout]
    truth = DynamicParams.from_dict(side["pi_star"]) if side else None
    evals = {}
    for p in report_paths:
        try:
            rep = EstimatorReport.from_dict(read_json(p))
        except (KeyError, TypeError, ModelError) as e:
            raise CliError(f"{p}: not an estimator report ({e})") from None
        if list(rep.pi_hat.names) != layout:
            raise CliError(f"{p}: parameter layout does not match the mechanism")
        try:
            evals[rep.kind] = evaluate_estimate(mech, rep.kind, rep.pi_hat, sets, truth=truth,
                                                projector=np.eye(mech.d))
        except ModelError as e:
            raise CliError(f"evaluate: {e}") from None
    files = write_evaluations(out, evals)
    write_manifest(out, files, "evaluate")
    print(summary_table(evals), end="")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    if args.profile is None:
        raise CliError("--profile is required; choose from " + ", ".join(experiments.PROFILES))
    out = _outdir(args)
    seed = args.seed or 0
    if args.n_seeds and args.n_seeds > 1:
        return _reproduce_trend(args, out, seed)
    cfg = experiments.profile_config(args.profile, seed)
    if args.estimators:
        d = cfg.to_dict()
        d["estimators"] = [{"kind": k} for k in _estimator_list(args.estimators)]
        cfg = experiments.ExperimentConfig.from_dict(d)
    try:
        res = experiments.run(cfg)
    except experiments.StageError as e:
        code = EXIT_SOLVER if isinstance(e.cause, EstimatorError) else EXIT_INVALID
        raise CliError(str(e), code) from None
    files = write_datasets(out, cfg, res.generated)
    write_json(out / "config.json", cfg.to_dict())
    files.append(out / "config.json")
    files += write_reports(out, res.reports)
    if res.evaluations:
        files += write_evaluations(out, res.evaluations)
    if res.invariance:
        write_json(out / "invariance.json", res.invariance)
        files.append(out / "invariance.json")
    write_json(out / "checks.json", [c.to_dict() for c in res.checks if c.name != "runtime"])
    files.append(out / "checks.json")
    write_manifest(out, files, f"reproduce {args.profile}",
                   {"timings_s": res.timings, "runtime_check": next(c.to_dict() for c in res.checks if c.name == "runtime")})
    print(f"profile {args.profile}, seed {seed}, {len(res.generated.train)} training samples")
    for c in res.checks:
        print(c.line())
    if any(not r.ok for r in res.reports.values()):
        return EXIT_SOLVER
    return EXIT_OK if res.passed else EXIT_ACCEPTANCE


def _reproduce_trend(args, out: Path, seed: int) -> int:
    if args.profile == "invariance":
        raise CliError("--n-seeds applies to the trend profiles only")
    seeds = range(seed, seed + args.n_seeds)
    study = experiments.trend_study(args.profile, seeds,
                                    progress=lambda s, r: print(f"seed {s}: " + ", ".join(
                                        f"{k} {v:.5f}" for k, v in r.shape_ncc().items()), flush=True))
    write_json(out / "trend.json", study)
    write_manifest(out, [out / "trend.json"], f"reproduce {args.profile} x{args.n_seeds}")
    need = int(np.ceil(0.8 * len(seeds)))
    ok = True
    for k, w in study["wins"].items():
        passed = w >= need
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] dual-metric shape NCC >= {k} on {w}/{len(seeds)} seeds (need {need})")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualid", description="Coordinate-independent inverse-dynamics identification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV})")
        sp.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        return sp

    common(sub.add_parser("simulate", help="simulate training and test trajectories"))
    sp = common(sub.add_parser("identify", help="fit estimators to dataset files"))
    sp.add_argument("--estimators", help="comma-separated estimator names")
    sp.add_argument("--sidecar", help="ground-truth sidecar (default: next to the datasets)")
    sp.add_argument("paths", nargs="+", help="training dataset files")
    sp = common(sub.add_parser("evaluate", help="evaluate estimator reports on test datasets"))
    sp.add_argument("--sidecar", help="ground-truth sidecar (default: next to the datasets)")
    sp.add_argument("paths", nargs="+", help="report files (.json) and test dataset files (.csv)")
    sp = common(sub.add_parser("reproduce", help="run a named profile end to end"), config=False)
    sp.add_argument("--profile", choices=experiments.PROFILES)
    sp.add_argument("--estimators", help="comma-separated estimator names")
    sp.add_argument("--n-seeds", type=int, default=1, help="trend profiles: seeds to run, starting at --seed")
    return p


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "evaluate": cmd_evaluate,
            "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
