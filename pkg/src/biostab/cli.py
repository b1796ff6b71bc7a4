"""Command-line front end: resolve parameters, run pipeline stages, write artifacts."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .base_state import solve_base_state
from .config import (
    InvalidParams,
    Params,
    TaxisError,
    load_config,
    params_from_mapping,
    taxis_from_params,
    validate,
)
from .neutral_curve import (
    CALIBRATED_TAXIS,
    K_RANGE,
    N_SAMPLES,
    PRESETS,
    REFINE_TOL,
    build_problem,
    calibrate_taxis,
    find_critical,
    preset_params,
    sweep_table,
    table_row_values,
    TABLE_COLUMNS,
    trace_curve,
)
from .stability import growth_rate

log = logging.getLogger("biostab")

SUBCOMMANDS = ("base-state", "neutral", "critical", "growth", "table", "calibrate")


class CurveGaps(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    params: dict
    taxis: dict
    out_dir: str
    stages: list = field(default_factory=list)
    calibration: dict | None = None
    version: str = __version__

    def write(self, path):
        data = dict(
            command=self.command,
            version=self.version,
            params=self.params,
            taxis=self.taxis,
            out_dir=self.out_dir,
            stages=self.stages,
        )
        if self.calibration is not None:
            data["calibration"] = self.calibration
        Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


class Run:
    """Output directory plus manifest bookkeeping.

    Every artifact is first written as ``name.partial`` and renamed once its
    stage finishes, so a failed stage leaves only ``.partial`` files behind.
    """

    def __init__(self, out, manifest: RunManifest):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def path(self, name):
        return self.out / (name + ".partial")

    def stage(self, name, fn):
        log.info("stage %s", name)
        t0 = time.perf_counter()
        record = dict(name=name, status="running", seconds=None, outputs={})
        self.manifest.stages.append(record)
        try:
            written = fn(self) or []
        except Exception as exc:
            record.update(status="failed", error=str(exc), seconds=time.perf_counter() - t0)
            for p in sorted(self.out.glob("*.partial")):
                record["outputs"][p.name] = sha256(p)
            raise StageError(name, exc) from exc
        for name_ in written:
            final = self.out / name_
            os.replace(self.path(name_), final)
            record["outputs"][name_] = sha256(final)
        record.update(status="ok", seconds=time.perf_counter() - t0)
        return record

    def finish(self):
        self.manifest.write(self.out / "manifest.json")


def write_columns(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


def write_dat(path, header, x, y):
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for a, b in zip(x, y):
            fh.write(f"{a:.12g} {b:.12g}\n")


def parse_k_range(text):
    try:
        a, b, n = text.split(":")
        k_min, k_max, count = float(a), float(b), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B:N, got {text!r}") from None
    if not 0 < k_min < k_max or count < 16:
        raise argparse.ArgumentTypeError("need 0 < A < B and N >= 16")
    return k_min, k_max, count


def parse_assignment(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML or JSON parameter file (default $BIOSTAB_CONFIG)")
    common.add_argument("--out", default="biostab_out", help="output directory")
    common.add_argument("--preset", choices=sorted(PRESETS), help="pin the tabulated parameter set")
    common.add_argument("--k-range", type=parse_k_range, metavar="A:B:N",
                        help=f"log-spaced wavenumbers (default {K_RANGE[0]}:{K_RANGE[1]}:{N_SAMPLES})")
    common.add_argument("--taylor", type=float, help="Taylor number")
    common.add_argument("--albedo", type=float, help="scattering albedo")
    common.add_argument("--aniso", type=float, help="forward-scattering coefficient")
    common.add_argument("--nz", type=int, help="vertical grid points (odd)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--set", type=parse_assignment, action="append", default=[],
                        metavar="KEY=VALUE", help="any other parameter, repeatable")
    common.add_argument("--taxis", choices=("default", "calibrated"), default="default",
                        help="tanh taxis parameters from the config, or the frozen calibration")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="biostab", description=__doc__)
    ap.add_argument("--version", action="version", version=f"biostab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("base-state", parents=[common], help="equilibrium light and cell profiles")
    p = sub.add_parser("growth", parents=[common], help="leading growth rate at (k, R)")
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--R", type=float, required=True)
    p = sub.add_parser("neutral", parents=[common], help="neutral curve R(k)")
    p.add_argument("--mode", type=int, default=1, help="n-th stationary crossing (default lowest)")
    p = sub.add_parser("critical", parents=[common], help="critical wavenumber and Rayleigh number")
    p.add_argument("--refine-tol", type=float, default=REFINE_TOL)
    p = sub.add_parser("table", parents=[common], help="critical points over a preset grid")
    p.add_argument("--refine-tol", type=float, default=REFINE_TOL)
    sub.add_parser("calibrate", parents=[common], help="fit the taxis to the anchor row")
    return ap


def resolve_params(args) -> Params:
    params = preset_params(args.preset) if args.preset else Params()
    params = load_config(args.config, params)
    if args.taxis == "calibrated":
        params = params.with_(**CALIBRATED_TAXIS)
    flags = dict(taylor=args.taylor, albedo=args.albedo, aniso=args.aniso, nz=args.nz)
    params = params.with_(**{k: v for k, v in flags.items() if v is not None})
    params = params_from_mapping(dict(args.set), params)
    return validate(params)


def _k_range(args, n_default):
    if args.k_range:
        return args.k_range
    return K_RANGE[0], K_RANGE[1], n_default


def cmd_base_state(run: Run, params):
    state = {}

    def stage(r):
        problem = build_problem(params)
        state["problem"] = problem
        rad, base = problem.rad, problem.base
        rad.to_csv(r.path("radiative.csv"))
        base.to_csv(r.path("base_state.csv"))
        write_dat(r.path("light.dat"), "tau G_s", rad.tau, rad.G)
        write_dat(r.path("concentration.dat"), "z n_s", base.z, base.n)
        report = dict(
            z_star=base.z_star,
            multiple_crossings=base.multiple_crossings,
            n_bottom=float(base.n[0]),
            n_top=float(base.n[-1]),
            z_peak=float(base.z[np.argmax(base.n)]),
            mean_concentration=base.mean_concentration(),
            radiative_residual=rad.residual,
        )
        r.path("sublayer.json").write_text(json.dumps(report, indent=2) + "\n")
        return ["radiative.csv", "base_state.csv", "light.dat", "concentration.dat", "sublayer.json"]

    run.stage("base-state", stage)
    return state["problem"]


def cmd_growth(run: Run, params, args):
    problem = cmd_base_state(run, params)

    def stage(r):
        op = problem.operator(args.k)
        sol = growth_rate(problem.base, problem.coeffs, op, params, args.k, args.R)
        sol.to_csv(r.path("eigenfunction.csv"))
        out = dict(k=args.k, R=args.R, taylor=params.taylor,
                   sigma_re=sol.sigma.real, sigma_im=sol.sigma.imag)
        r.path("growth.json").write_text(json.dumps(out, indent=2) + "\n")
        print(f"sigma = {sol.sigma.real:.10g} {sol.sigma.imag:+.10g}i")
        return ["eigenfunction.csv", "growth.json"]

    run.stage("growth", stage)


def _trace(run: Run, problem, args, n_default, mode=1):
    k_min, k_max, n = _k_range(args, n_default)
    state = {}

    def stage(r):
        curve = trace_curve(problem, k_min, k_max, n, jobs=args.jobs, mode=mode)
        state["curve"] = curve
        curve.to_csv(r.path("neutral_curve.csv"))
        curve.to_dat(r.path("neutral_curve.dat"))
        summary = dict(k_b=curve.k_b, gaps=[dict(k=k, reason=why) for k, why in curve.gaps],
                       params_hash=curve.params_hash, samples=len(curve.points))
        r.path("neutral_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        if curve.gaps:
            raise CurveGaps(f"no neutral point at {len(curve.gaps)} wavenumbers")
        return ["neutral_curve.csv", "neutral_curve.dat", "neutral_summary.json"]

    try:
        run.stage("neutral", stage)
    except StageError as exc:
        if not isinstance(exc.__cause__, CurveGaps) or not state["curve"].points:
            raise
        # gaps are not fatal for the critical point, but the exit status reports them
        run.gaps = True
    return state["curve"]


def cmd_neutral(run, params, args):
    problem = cmd_base_state(run, params)
    _trace(run, problem, args, N_SAMPLES, args.mode)


def cmd_critical(run, params, args):
    problem = cmd_base_state(run, params)
    curve = _trace(run, problem, args, 16)

    def stage(r):
        crit = find_critical(curve, args.refine_tol)
        crit.to_json(r.path("critical.json"))
        flag = "  (edge minimum, widen range)" if crit.edge_minimum else ""
        print(f"k_c = {crit.k_c:.6g}  lambda_c = {crit.wavelength:.6g}  R_c = {crit.R_c:.6g}"
              f"  Im sigma = {crit.im_sigma:.6g}{flag}")
        return ["critical.json"]

    run.stage("critical", stage)


def cmd_table(run, params, args):
    name = args.preset or "table1"
    k_min, k_max, n = _k_range(args, 16)
    fname = f"{name}.csv"

    def stage(r):
        path = r.path(fname)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TABLE_COLUMNS)
        done = []

        def on_row(row):
            done.append(row)
            log.info("omega=%g T_a=%g A=%g done", row.albedo, row.taylor, row.aniso)

        rows = sweep_table(name, params, (k_min, k_max), n, args.refine_tol, args.jobs, on_row)
        # rows are written in table order once the sweep is complete
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in table_row_values(row)])
        failed = [row for row in rows if row.critical is None]
        if failed:
            raise RuntimeError(f"{len(failed)} of {len(rows)} rows did not converge")
        return [fname]

    run.stage("table", stage)


def cmd_calibrate(run, params, args):
    def stage(r):
        cal = calibrate_taxis(params)
        run.manifest.calibration = cal.as_dict()
        r.path("calibration.json").write_text(json.dumps(cal.as_dict(), indent=2) + "\n")
        print(json.dumps(cal.as_dict(), indent=2))
        return ["calibration.json"]

    run.stage("calibrate", stage)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        params = resolve_params(args)
    except (OSError, InvalidParams, ValueError, KeyError) as exc:
        print(f"biostab: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        taxis = taxis_from_params(params).describe()
    except TaxisError as exc:
        print(f"biostab: configuration error: {exc}", file=sys.stderr)
        return 2
    manifest = RunManifest(args.command, params.as_dict(), taxis, str(Path(args.out).resolve()))
    if args.taxis == "calibrated":
        manifest.calibration = dict(CALIBRATED_TAXIS, source="frozen calibration")
    run = Run(args.out, manifest)
    run.gaps = False
    handlers = {
        "base-state": lambda: cmd_base_state(run, params),
        "growth": lambda: cmd_growth(run, params, args),
        "neutral": lambda: cmd_neutral(run, params, args),
        "critical": lambda: cmd_critical(run, params, args),
        "table": lambda: cmd_table(run, params, args),
        "calibrate": lambda: cmd_calibrate(run, params, args),
    }
    status = 0
    try:
        handlers[args.command]()
    except StageError as exc:
        print(f"biostab: {exc}", file=sys.stderr)
        status = 1
    finally:
        run.finish()
    if run.gaps and status == 0:
        print("biostab: neutral curve has gaps; see neutral_summary.json.partial", file=sys.stderr)
        status = 1
    return status


if __name__ == "__main__":
    raise SystemExit(main())
