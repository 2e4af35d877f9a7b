"""Batch entry point.

Subcommands::

    softeq run <config.toml>                 solve and write reports
    softeq verify <config.toml> <run_dir>    re-check a finished run
    softeq rate <run_dir> [--window LO HI]   fit the geometric decay rate

Exit codes: 0 ok, 1 config/IO/validation error, 2 not converged,
3 verification failure.  The SOFTEQ_THREADS environment variable (integer
>= 1, default: machine parallelism) caps worker threads; the current
solver is vectorized and bit-deterministic for any setting, and the value
is recorded in the report.

Config is a single TOML file; coefficient expressions are plain strings.
See README for the full key reference.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import pia as pia_mod
from . import verify as verify_mod
from .model import (
    GridSpec,
    ProblemSpec,
    UnknownProblem,
    ValidationError,
    builtin_problem,
    validate,
)
from .pde1d import Field1D, Mesh, SlabField

SCHEMA_VERSION = 1

_EXPR_FIELDS = (
    "drift_b",
    "vol_sigma",
    "reward_r",
    "discount_delta",
    "terminal_F",
    "terminal_h",
    "nonlinear_G",
    "nonlinear_G_z",
)


@dataclass
class RunConfig:
    problem: ProblemSpec
    grid: GridSpec
    init_mode: object
    tol: float
    max_iters: int
    verify: dict
    out_dir: Path
    raw: dict = field(default_factory=dict)
    problem_name: str = "inline"


def thread_count() -> int:
    raw = os.environ.get("SOFTEQ_THREADS", "")
    if raw:
        n = int(raw)
        if n < 1:
            raise ValidationError("SOFTEQ_THREADS must be an integer >= 1")
        return n
    return os.cpu_count() or 1


def load_config(path: str | Path) -> RunConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    ptab = raw.get("problem", {})
    if "builtin" in ptab:
        name = ptab["builtin"]
        problem = builtin_problem(name, ptab.get("params", {}))
    else:
        exprs = ptab.get("expressions")
        if not exprs:
            raise ValidationError("config [problem] needs 'builtin' or [problem.expressions]")
        missing = [k for k in _EXPR_FIELDS if k not in exprs]
        if missing:
            raise ValidationError(f"[problem.expressions] missing {missing}")
        name = "inline"
        problem = ProblemSpec.from_strings(
            {k: exprs[k] for k in _EXPR_FIELDS},
            temperature_lambda=ptab.get("lambda", 1.0),
            horizon_T=ptab.get("T", 1.0),
            action_interval=(ptab["a_lo"], ptab["a_hi"]),
        )

    gtab = raw.get("grid", {})
    grid = GridSpec(
        x_min=float(gtab.get("x_min", -3.0)),
        x_max=float(gtab.get("x_max", 3.0)),
        n_x=int(gtab.get("n_x", 65)),
        n_t=int(gtab.get("n_t", 33)),
        n_a=int(gtab.get("n_a", 16)),
        boundary_buffer=int(gtab.get("boundary_buffer", 2)),
        storage_mode=gtab.get("storage_mode", "diagonal_slab"),
        memory_cap_entries=int(gtab.get("memory_cap_entries", 40_000_000)),
    )

    ptab2 = raw.get("pia", {})
    init_mode = ptab2.get("init_mode", "zero")
    if init_mode == "expr":
        init_mode = ("expr", ptab2.get("init_v1", "0"), ptab2.get("init_v2", "0"))
    tol = float(ptab2.get("tol", 1e-7))
    max_iters = int(ptab2.get("max_iters", 60))

    otab = raw.get("output", {})
    out_dir = Path(otab.get("dir", "softeq_out"))

    return RunConfig(
        problem=problem,
        grid=grid,
        init_mode=init_mode,
        tol=tol,
        max_iters=max_iters,
        verify=raw.get("verify", {}),
        out_dir=out_dir,
        raw=raw,
        problem_name=name,
    )


def _write_field_csv(path: Path, mesh: Mesh, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("t,x,value\n")
        for i, t in enumerate(mesh.times):
            for j, x in enumerate(mesh.xs):
                fh.write(f"{float(t)!r},{float(x)!r},{float(values[i, j])!r}\n")


def _read_field_csv(path: Path, mesh: Mesh) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if data.shape[0] != mesh.n_t * mesh.n_x:
        raise ValidationError(f"{path} does not match the configured grid")
    return np.ascontiguousarray(data[:, 2].reshape(mesh.n_t, mesh.n_x))


def _report_dict(config: RunConfig, report: pia_mod.IterationReport, seed: int) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config.raw,
        "problem": config.problem_name,
        "grid": {
            "x_min": config.grid.x_min,
            "x_max": config.grid.x_max,
            "n_x": config.grid.n_x,
            "n_t": config.grid.n_t,
            "n_a": config.grid.n_a,
            "boundary_buffer": config.grid.boundary_buffer,
            "storage_mode": config.grid.storage_mode,
        },
        "seed": seed,
        "thread_count": thread_count(),
        "pia": report.as_dict(),
        "converged": report.converged,
        "p_hat": report.rate.p_hat if report.rate is not None else None,
        "timing": {
            "total_wall_ms": sum(r.wall_ms for r in report.records),
        },
    }


def _strip_wall_clock(obj):
    """Remove wall-clock data so reports can be compared for reproducibility."""
    if isinstance(obj, dict):
        return {
            k: _strip_wall_clock(v)
            for k, v in obj.items()
            if k not in ("wall_ms", "timing", "total_wall_ms")
        }
    if isinstance(obj, list):
        return [_strip_wall_clock(v) for v in obj]
    return obj


def _dump_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_report_schema(payload: dict) -> None:
    import importlib.resources

    import jsonschema

    schema = json.loads(
        importlib.resources.files("softeq").joinpath("report_schema.json").read_text()
    )
    jsonschema.validate(payload, schema)


def cmd_run(config_path: str) -> int:
    try:
        config = load_config(config_path)
        report_v = validate(config.problem, config.grid)
    except (ValidationError, UnknownProblem, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"softeq: config/validation error: {exc}", file=sys.stderr)
        return 1

    seed = int(config.verify.get("seed", 20240801))
    exit_code = 0
    try:
        state, report = pia_mod.run(
            config.problem, config.grid, config.init_mode, config.tol, config.max_iters
        )
    except pia_mod.NotConverged as exc:
        report = exc.report
        state = None
        exit_code = 2
        print(f"softeq: {exc}", file=sys.stderr)

    out = config.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        payload = _report_dict(config, report, seed)
        payload["validation"] = report_v.as_dict()
        _dump_json(out / "report.json", payload)
        validate_report_schema(payload)
        report.write_increments_csv(out / "increments.csv")
        with open(out / "plotdata.csv", "w") as fh:
            fh.write("n,ln_increment\n")
            for rec in report.records:
                fh.write(f"{rec.n},{float(np.log(rec.c2))!r}\n")

        if state is not None:
            mesh = state.mesh
            _write_field_csv(out / "v2.csv", mesh, state.v2.values)
            _write_field_csv(out / "z.csv", mesh, state.z.values)
            _write_field_csv(out / "j.csv", mesh, pia_mod.objective_field(state).values)
            np.save(out / "slab_diag.npy", state.slab.diag)
            np.save(out / "slab_next.npy", state.slab.next_rows)
    except OSError as exc:
        print(f"softeq: cannot write outputs: {exc}", file=sys.stderr)
        return 1
    return exit_code


def _load_state(config: RunConfig, run_dir: Path) -> tuple[pia_mod.IterateState, dict]:
    report_path = run_dir / "report.json"
    with open(report_path) as fh:
        saved = json.load(fh)
    ws = pia_mod.Workspace(config.problem, config.grid)
    mesh = ws.mesh
    v2 = Field1D(mesh, _read_field_csv(run_dir / "v2.csv", mesh))
    z = Field1D(mesh, _read_field_csv(run_dir / "z.csv", mesh))
    diag = np.load(run_dir / "slab_diag.npy")
    nxt = np.load(run_dir / "slab_next.npy")
    slab = SlabField(mesh, diag, nxt)
    tables = ws.tables(z.values)
    records = saved["pia"]["records"]
    last_inc = records[-1]["c2"] if records else None
    state = pia_mod.IterateState(
        n=len(records),
        slab=slab,
        v2=v2,
        z=z,
        log_partition=Field1D(mesh, tables.log_partition),
        mean_drift=Field1D(mesh, tables.mean_drift),
        workspace=ws,
        value_norms={},
        last_increment=last_inc,
        tol=saved["pia"]["tol"],
    )
    return state, saved


def cmd_verify(config_path: str, run_dir: str) -> int:
    try:
        config = load_config(config_path)
        state, saved = _load_state(config, Path(run_dir))
    except (ValidationError, UnknownProblem, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"softeq: cannot load run: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"softeq: snapshot unreadable: {exc}", file=sys.stderr)
        return 1

    vtab = config.verify
    suites = vtab.get("suites", ["eehjb", "equilibrium", "mc"])
    tol = float(saved["pia"]["tol"])
    reports: list[verify_mod.SuiteReport] = []

    if "eehjb" in suites:
        sup1, sup2 = verify_mod.eehjb_residual(config.problem, config.grid, state)
        threshold = float(vtab.get("eehjb_floor", 10.0 * tol))
        reports.append(
            verify_mod.SuiteReport(
                "eehjb_residual",
                [
                    verify_mod.SuiteCheck(
                        "v1_diagonal_residual", sup1 <= threshold, sup1, threshold
                    ),
                    verify_mod.SuiteCheck("v2_residual", sup2 <= threshold, sup2, threshold),
                ],
            )
        )

    if "equilibrium" in suites:
        reports.append(_equilibrium_sweep(config, state, vtab))

    if "mc" in suites:
        reports.append(_mc_suite(config, state, vtab))

    if "tc_reduction" in suites:
        if config.problem_name == "tc_reduction":
            params = dict(config.raw.get("problem", {}).get("params", {}))
            params.setdefault("n_x", config.grid.n_x)
            params.setdefault("n_t", config.grid.n_t)
            params.setdefault("n_a", config.grid.n_a)
            reports.append(verify_mod.tc_reduction_suite(params))
        else:
            reports.append(
                verify_mod.SuiteReport(
                    "tc_reduction",
                    [
                        verify_mod.SuiteCheck(
                            "applicable",
                            True,
                            0.0,
                            0.0,
                            "skipped: problem is not the time-consistent reduction",
                        )
                    ],
                )
            )

    if "boundary" in suites:
        sens = verify_mod.boundary_sensitivity(
            config.problem, config.grid, config.init_mode, config.tol, config.max_iters
        )
        threshold = float(vtab.get("boundary_floor", 1e-2))
        reports.append(
            verify_mod.SuiteReport(
                "boundary_sensitivity",
                [
                    verify_mod.SuiteCheck(
                        "max_interior_change",
                        sens["max_interior_change"] <= threshold,
                        sens["max_interior_change"],
                        threshold,
                        f"domain widened by {sens['widened_nodes_per_side']} nodes per side",
                    )
                ],
            )
        )

    payload = {
        "schema_version": SCHEMA_VERSION,
        "run_dir": str(run_dir),
        "suites": [r.as_dict() for r in reports],
        "passed": all(r.passed for r in reports),
    }
    _dump_json(Path(run_dir) / "verify.json", payload)
    for r in reports:
        for c in r.checks:
            flag = "PASS" if c.passed else "FAIL"
            print(f"[{flag}] {r.name}/{c.name}: {c.value:.6g} (threshold {c.threshold:.6g})")
    if not payload["passed"]:
        failing = [
            f"{r.name}/{c.name}" for r in reports for c in r.checks if not c.passed
        ]
        print(f"softeq: verification failed: {', '.join(failing)}", file=sys.stderr)
        return 3
    return 0


def _equilibrium_sweep(
    config: RunConfig, state: pia_mod.IterateState, vtab: dict
) -> verify_mod.SuiteReport:
    mesh = state.mesh
    floor = float(vtab.get("equilibrium_floor", 1e-3))
    stride = int(vtab.get("equilibrium_stride", max(1, mesh.n_x // 16)))
    deviations = [
        _parse_deviation(d)
        for d in vtab.get(
            "deviations",
            ["uniform", "dirac_lo", "dirac_hi", "gibbs_shift:0.5", "gibbs_shift:-0.5"],
        )
    ]
    t_idx = range(0, mesh.n_t, max(1, mesh.n_t // 16))
    x_idx = range(mesh.buffer, mesh.n_x - mesh.buffer, stride)
    worst = -np.inf
    self_worst = 0.0
    for ti in t_idx:
        t = float(mesh.times[ti])
        for xi in x_idx:
            x = float(mesh.xs[xi])
            g = verify_mod.equilibrium_residual(
                config.problem, config.grid, state, "gibbs", t, x
            )
            self_worst = max(self_worst, abs(g))
            for dev in deviations:
                val = verify_mod.equilibrium_residual(
                    config.problem, config.grid, state, dev, t, x
                )
                worst = max(worst, val)
    return verify_mod.SuiteReport(
        "equilibrium_residual",
        [
            verify_mod.SuiteCheck(
                "deviation_sweep_max", worst <= floor, float(worst), floor,
                "max first-order gain over sampled deviations and lattice points",
            ),
            verify_mod.SuiteCheck(
                "converged_policy_residual",
                self_worst <= floor / 10.0,
                self_worst,
                floor / 10.0,
            ),
        ],
    )


def _parse_deviation(text):
    if isinstance(text, (tuple, list)):
        return ("gibbs_shift", float(text[1]))
    if text.startswith("gibbs_shift:"):
        return ("gibbs_shift", float(text.split(":", 1)[1]))
    return text


def _mc_suite(config: RunConfig, state: pia_mod.IterateState, vtab: dict) -> verify_mod.SuiteReport:
    from .gibbs import build_quadrature

    mesh = state.mesh
    seed = int(vtab.get("seed", 20240801))
    mc = verify_mod.McConfig(
        n_paths=int(vtab.get("mc_paths", 200_000)),
        n_steps=int(vtab.get("mc_steps", 200)),
        rng_seed=seed,
        antithetic=bool(vtab.get("antithetic", True)),
    )
    n_points = int(vtab.get("mc_points", 5))
    floor = float(vtab.get("mc_floor", 1e-3))
    a_lo, a_hi = config.problem.action_interval
    quad = build_quadrature(a_lo, a_hi, config.grid.n_a)
    rng = np.random.default_rng(seed)
    checks = []
    t_hi = max(1, int(2 * mesh.n_t / 3))
    # sample the central quarter of the domain: the escape-fraction
    # requirement (< 1%) bounds how close to the truncation wall the
    # oracle stays valid
    inner_lo = max(mesh.buffer, 3 * mesh.n_x // 8)
    inner_hi = min(mesh.n_x - mesh.buffer, 5 * mesh.n_x // 8)
    for k in range(n_points):
        ti = int(rng.integers(0, t_hi))
        xi = int(rng.integers(inner_lo, inner_hi))
        t = float(mesh.times[ti])
        x = float(mesh.xs[xi])
        res = verify_mod.mc_value(config.problem, state.z, t, t, x, x, mc, quad)
        v1_pde = float(state.slab.diag[ti, xi, xi])
        v2_pde = float(state.v2.values[ti, xi])
        tol1 = 3.0 * res.se_v1 + floor
        tol2 = 3.0 * res.se_v2 + floor
        ok = (
            abs(res.v1 - v1_pde) <= tol1
            and abs(res.v2 - v2_pde) <= tol2
            and res.reliable
        )
        detail = (
            f"v1 diff {abs(res.v1 - v1_pde):.3g} (3se+floor {tol1:.3g}), "
            f"v2 diff {abs(res.v2 - v2_pde):.3g} (3se+floor {tol2:.3g}), "
            f"escape fraction {res.escape_fraction:.4f}"
        )
        checks.append(
            verify_mod.SuiteCheck(
                f"point_{k}_t{ti}_x{xi}",
                ok,
                max(abs(res.v1 - v1_pde), abs(res.v2 - v2_pde)),
                max(tol1, tol2),
                detail,
            )
        )
    return verify_mod.SuiteReport("mc_cross_check", checks)


def cmd_rate(run_dir: str, window: tuple[int, int] | None = None) -> int:
    path = Path(run_dir) / "increments.csv"
    try:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        print(f"softeq: {exc}", file=sys.stderr)
        return 1
    if rows.size == 0:
        print("softeq: increments.csv is empty", file=sys.stderr)
        return 1
    ns = rows[:, 0].astype(int)
    ds = rows[:, 4]
    if window is None:
        lo_n, hi_n = (2 if len(ns) > 2 else int(ns[0])), int(ns[-1])
    else:
        lo_n, hi_n = window
    keep = (ns >= lo_n) & (ns <= hi_n)
    if keep.sum() < 3:
        print("softeq: window holds fewer than 3 increments", file=sys.stderr)
        return 1
    try:
        fit = verify_mod.fit_rate(list(ds[keep]), window=(0, int(keep.sum()) - 1))
    except (verify_mod.InsufficientData, verify_mod.NonPositiveIncrement) as exc:
        print(f"softeq: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"p_hat": fit.p_hat, "C_hat": fit.c_hat, "r2": fit.r_squared}))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="softeq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="validate, solve, and write reports")
    p_run.add_argument("config")
    p_verify = sub.add_parser("verify", help="run verification suites on a finished run")
    p_verify.add_argument("config")
    p_verify.add_argument("run_dir")
    p_rate = sub.add_parser("rate", help="fit the geometric decay rate of increments")
    p_rate.add_argument("run_dir")
    p_rate.add_argument("--window", nargs=2, type=int, metavar=("N_LO", "N_HI"))
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "verify":
        return cmd_verify(args.config, args.run_dir)
    window = tuple(args.window) if args.window else None
    return cmd_rate(args.run_dir, window)


if __name__ == "__main__":
    sys.exit(main())
