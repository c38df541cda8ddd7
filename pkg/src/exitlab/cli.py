"""Command line interface.

Subcommands: simulate, lln-check, basin, minpath, profile,
exit-measure, selftest.  Every run resolves its configuration from
flags, an optional INI file, and the environment (flags win), writes
its artifacts into one output directory, and finishes with a
manifest.json recording the fully resolved configuration, the package
version, and a sha256 hash of every emitted file.  Nothing is written
outside the output directory.

Exit status: 0 on success, 2 for configuration errors (the message
names the offending key), 1 for numeric or runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .action import path_action, lagrangian, relative_entropy_f, velocity_decomposition
from .basin import (BoundaryTrace, TraceLocator, characteristic_check,
                    integrate_ode, trace_boundary, trace_to_csv)
from .config import (MODEL_PARAM_KEYS, NUMERICS_SCHEMA, RUN_SCHEMA, RunConfig,
                     load_file, resolve)
from .errors import (ConfigError, ExitlabError, NoConnection, RegimeViolation,
                     UnknownModel)
from .experiment import _derive_seed, _sha256, run_exit_measure, write_report
from .models import (ModelSpec, build_model, check_positive_span, drift,
                     in_domain, sample_domain)
from .quasipotential import (boundary_profile, minimize_discrete_action,
                             shoot_heteroclinic)
from .ssa import exit_experiment, path_to_csv, simulate

__all__ = ["dispatch", "main"]

_STOP_CHOICES = ("at_horizon", "at_exit", "at_absorption")
_METHOD_CHOICES = ("shooting", "discrete", "both")

# canonical parameter sets exercised by `exitlab selftest`
_SELFTEST_PARAMS = {
    "sirs": {"lambda": 2.0, "gamma": 1.0, "rho": 1.0},
    "sir_demography": {"lambda": 2.0, "gamma": 1.0, "mu": 0.1},
    "siv": {"beta": 4.0, "gamma": 1.0, "eta": 0.5, "theta": 0.05,
            "mu": 0.05, "chi": 0.1},
    "s0is1": {"beta": 0.9, "alpha": 1.0, "mu": 0.2, "r": 3.0},
}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitlab",
        description="Jump-process simulation, action minimization, and "
                    "boundary exit-measure experiments.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--config", metavar="FILE",
                       help="INI configuration file")
        p.add_argument("--model", help="built-in model name")
        for key in MODEL_PARAM_KEYS:
            p.add_argument(f"--{key}", type=float, dest=f"param_{key}",
                           metavar="X", help=f"model parameter {key}")
        p.add_argument("--seed", type=int,
                       help="master seed (default: EXITLAB_SEED or 0)")
        p.add_argument("--jobs", type=int,
                       help="worker processes (default: all cores)")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (default: exitlab-out)")
        for key in NUMERICS_SCHEMA:
            p.add_argument(f"--{key.replace('_', '-')}", type=float,
                           dest=key, metavar="X",
                           help=f"numerics override {key}")
        return p

    p = add("simulate", "run one trajectory of the jump process")
    p.add_argument("--N", type=int, help="population scale")
    p.add_argument("--T", type=float, help="time horizon")
    p.add_argument("--reflect", action=argparse.BooleanOptionalAction,
                   default=None, help="suppress domain-leaving jumps")
    p.add_argument("--stop", choices=_STOP_CHOICES)

    p = add("lln-check", "compare trajectories to the drift ODE")
    p.add_argument("--N", type=int)
    p.add_argument("--T", type=float)
    p.add_argument("--replicas", type=int)
    p.add_argument("--tol", type=float, help="sup-distance tolerance")

    p = add("basin", "trace the characteristic boundary of the basin")
    p.add_argument("--stride", type=int, help="export every stride-th vertex")

    p = add("minpath", "minimum-action connection to the boundary attractor")
    p.add_argument("--method", choices=_METHOD_CHOICES)
    p.add_argument("--M", type=int, help="discrete-minimizer cell count")
    p.add_argument("--refine", type=int, help="grid-doubling passes")

    p = add("profile", "quasipotential along the characteristic boundary")
    p.add_argument("--stride", type=int,
                   help="trace stride between profile points (0 = auto)")
    p.add_argument("--M", type=int)
    p.add_argument("--refine", type=int)

    p = add("exit-measure", "Monte Carlo exit law vs. the quasipotential")
    p.add_argument("--N-list", dest="N_list", metavar="N1,N2,...",
                   help="comma-separated ascending population scales")
    p.add_argument("--replicas", type=int)
    p.add_argument("--delta", type=float,
                   help="arclength radius counted as near the attractor")
    p.add_argument("--horizon", type=float)
    p.add_argument("--bin-width", type=float)
    p.add_argument("--profile-stride", type=int)
    p.add_argument("--profile-M", type=int)
    p.add_argument("--profile-refine", type=int)
    p.add_argument("--reflect", action=argparse.BooleanOptionalAction,
                   default=None)

    add("selftest", "fast invariant checks across the built-in models")
    return parser


def _flags(args: argparse.Namespace) -> dict:
    flags = {
        "model": args.model,
        "seed": args.seed,
        "jobs": args.jobs,
        "out": args.out,
    }
    for key in MODEL_PARAM_KEYS:
        flags[key] = getattr(args, f"param_{key}")
    for key in RUN_SCHEMA[args.command]:
        flags[key] = getattr(args, key, None)
    for key in NUMERICS_SCHEMA:
        flags[key] = getattr(args, key, None)
    return {k: v for k, v in flags.items() if v is not None}


def _require_model(cfg: RunConfig) -> ModelSpec:
    if not cfg.model_name:
        raise ConfigError("missing required key 'model' "
                          "(pass --model or set name under [model])")
    try:
        return build_model(cfg.model_name, cfg.model_params)
    except UnknownModel as exc:
        raise ConfigError(f"bad value for key 'model': {exc}") from exc
    except RegimeViolation as exc:
        raise ConfigError(f"bad model parameters: {exc}") from exc


def _emit_manifest(out: Path, files: list, cfg: RunConfig,
                   result: dict) -> dict:
    manifest = {
        "version": __version__,
        "config": cfg.effective(),
        "result": result,
        "files": {
            f.name: {"sha256": _sha256(f), "bytes": f.stat().st_size}
            for f in sorted(files, key=lambda p: p.name)
        },
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2, default=_jsonable)
        + "\n", encoding="utf-8")
    return manifest


def _cmd_simulate(cfg: RunConfig, out: Path) -> int:
    model = _require_model(cfg)
    run = cfg.run
    path = simulate(model, run["N"], model.endemic, run["T"],
                    reflect=run["reflect"], stop=run["stop"], seed=cfg.seed)
    files = [out / "trajectory.csv", out / "trajectory.png"]
    path_to_csv(path, files[0])
    smooth = integrate_ode(lambda z: drift(model, z), model.endemic,
                           (0.0, run["T"]),
                           rel_tol=cfg.numerics["rel_tol"],
                           abs_tol=cfg.numerics["abs_tol"],
                           grid=np.linspace(0.0, run["T"], 801))
    from . import figures
    figures.render_jump_path(path, files[1], smooth=smooth)
    result = {
        "events": int(len(path.times)),
        "suppressed": int(np.sum(path.suppressed)),
        "final_state": path.final_state().tolist(),
        "exited": path.exit is not None,
    }
    if path.exit is not None:
        result["exit"] = {"tau": float(path.exit.tau),
                          "location": path.exit.location.tolist(),
                          "mode": path.exit.mode}
    _emit_manifest(out, files, cfg, result)
    print(f"simulate: {result['events']} events, final state "
          f"{result['final_state']}, exited={result['exited']}")
    return 0


def _cmd_lln_check(cfg: RunConfig, out: Path) -> int:
    model = _require_model(cfg)
    run = cfg.run
    N, T = run["N"], run["T"]
    grid = np.linspace(0.0, T, 4001)
    smooth = integrate_ode(lambda z: drift(model, z), model.endemic,
                           (0.0, T), rel_tol=cfg.numerics["rel_tol"],
                           abs_tol=cfg.numerics["abs_tol"], grid=grid)
    sups = np.zeros(run["replicas"])
    worst = None
    for rep in range(run["replicas"]):
        path = simulate(model, N, model.endemic, T, reflect=False,
                        stop="at_horizon", seed=_derive_seed(cfg.seed, rep))
        if len(path.times):
            yx = np.interp(path.times, grid, smooth.points[:, 0])
            yy = np.interp(path.times, grid, smooth.points[:, 1])
            sups[rep] = float(np.hypot(path.states[:, 0] - yx,
                                       path.states[:, 1] - yy).max())
        if worst is None or sups[rep] >= sups[:rep + 1].max():
            worst = path
    within = sups < run["tol"]
    files = [out / "lln.csv", out / "lln.png"]
    with open(files[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "sup_distance", "within_tol"])
        for rep, s in enumerate(sups):
            w.writerow([rep, f"{s:.12g}", int(within[rep])])
    from . import figures
    figures.render_jump_path(worst, files[1], smooth=smooth)
    result = {
        "N": N, "T": T, "replicas": run["replicas"], "tol": run["tol"],
        "fraction_within": float(within.mean()),
        "max_sup_distance": float(sups.max()),
        "median_sup_distance": float(np.median(sups)),
    }
    _emit_manifest(out, files, cfg, result)
    print(f"lln-check: {int(within.sum())}/{run['replicas']} replicas "
          f"within {run['tol']:g} (max sup {sups.max():.4g})")
    return 0


def _cmd_basin(cfg: RunConfig, out: Path) -> int:
    model = _require_model(cfg)
    trace = trace_boundary(model, resolution=cfg.numerics["resolution"])
    violation = characteristic_check(model, trace)
    stride = max(1, cfg.run["stride"])
    export = trace if stride == 1 else BoundaryTrace(
        polyline=trace.polyline[::stride], normals=trace.normals[::stride],
        tolerance=trace.tolerance)
    files = [out / "trace.csv", out / "boundary.png"]
    trace_to_csv(export, files[0])
    from . import figures
    figures.render_plane_path(trace.polyline, files[1], model=model,
                              trace=trace, label="characteristic boundary")
    result = {
        "vertices": int(len(trace.polyline)),
        "exported_vertices": int(len(export.polyline)),
        "arclength": float(trace.arclength[-1]),
        "tolerance": float(trace.tolerance),
        "characteristic_violation": float(violation),
        "boundary_attractor": np.asarray(model.boundary_attractor).tolist(),
    }
    _emit_manifest(out, files, cfg, result)
    print(f"basin: {result['vertices']} vertices, arclength "
          f"{result['arclength']:.4f}, tangency violation {violation:.2e}")
    return 0


def _cmd_minpath(cfg: RunConfig, out: Path) -> int:
    model = _require_model(cfg)
    run = cfg.run
    method = run["method"]
    if method not in _METHOD_CHOICES:
        raise ConfigError(f"bad value for key 'method': {method!r} "
                          f"(allowed: {', '.join(_METHOD_CHOICES)})")
    results: dict = {}
    errors: dict = {}
    best_path = None
    if method in ("shooting", "both"):
        try:
            rs = shoot_heteroclinic(model)
            results["shooting"] = rs.as_dict()
            best_path = rs.path.points
        except (NoConnection, ExitlabError) as exc:
            if method == "shooting":
                raise
            errors["shooting"] = f"{type(exc).__name__}: {exc}"
    if method in ("discrete", "both"):
        rd = minimize_discrete_action(model, model.endemic,
                                      model.boundary_attractor, M=run["M"])
        cells = run["M"]
        for _ in range(run["refine"]):
            cells = 2 * cells + 1
            rd = minimize_discrete_action(
                model, model.endemic, model.boundary_attractor, M=cells,
                T_total=rd.diagnostics.get("T"), init_path=rd.path.points)
        results["discrete"] = rd.as_dict()
        if best_path is None:
            best_path = rd.path.points
    if not results:
        raise NoConnection("; ".join(errors.values()))
    summary: dict = {k: v["value"] for k, v in results.items()}
    if len(results) == 2:
        vs, vd = results["shooting"]["value"], results["discrete"]["value"]
        summary["relative_gap"] = abs(vs - vd) / max(vs, vd, 1e-300)
    files = [out / "minpath.json", out / "path.png"]
    files[0].write_text(
        json.dumps({"results": results, "errors": errors,
                    "summary": summary},
                   sort_keys=True, indent=2, default=_jsonable) + "\n",
        encoding="utf-8")
    from . import figures
    figures.render_plane_path(best_path, files[1], model=model,
                              label="minimum-action path")
    _emit_manifest(out, files, cfg, {"summary": summary, "errors": errors})
    for name, val in summary.items():
        print(f"minpath: {name} = {val:.9g}")
    return 0


def _cmd_profile(cfg: RunConfig, out: Path) -> int:
    model = _require_model(cfg)
    run = cfg.run
    trace = trace_boundary(model, resolution=cfg.numerics["resolution"])
    stride = run["stride"] or max(1, len(trace.polyline) // 16)
    table = boundary_profile(model, trace, stride=stride, M=run["M"],
                             refine=run["refine"], jobs=cfg.jobs)
    files = [out / "profile.csv", out / "profile.png"]
    table.to_csv(files[0])
    locator = TraceLocator(trace)
    s_attr, _, _ = locator.query(np.asarray(model.boundary_attractor,
                                            dtype=float))
    from . import figures
    figures.render_profile(table, files[1], s_attractor=float(s_attr))
    result = {
        "points": int(len(table.s)),
        "stride": int(stride),
        "V_boundary": float(np.nanmin(table.value)),
        "argmin_s": float(table.s[table.argmin_index]),
        "argmin_point": table.argmin_point.tolist(),
        "attractor_distance": float(table.attractor_distance),
        "gaps": list(table.gaps),
    }
    _emit_manifest(out, files, cfg, result)
    print(f"profile: {result['points']} points, min V = "
          f"{result['V_boundary']:.9g} at s = {result['argmin_s']:.4f} "
          f"(attractor distance {result['attractor_distance']:.2e})")
    return 0


def _cmd_exit_measure(cfg: RunConfig, out: Path) -> int:
    model = _require_model(cfg)
    run = cfg.run
    report = run_exit_measure(
        model, model.endemic, run["N_list"], run["replicas"],
        delta=run["delta"], horizon=run["horizon"], seed=cfg.seed,
        bin_width=run["bin_width"], reflect=run["reflect"],
        profile_stride=(run["profile_stride"] or None),
        profile_M=run["profile_M"], profile_refine=run["profile_refine"],
        jobs=cfg.jobs)
    write_report(report, out, config=cfg.effective())
    for N in report.N_list:
        b = report.batch(N)
        print(f"exit-measure: N={N} exits={b.n_exits}/{report.replicas} "
              f"near-attractor fraction={b.fraction_near:.3f} "
              f"(se {b.fraction_stderr:.3f}) "
              f"mode bin contains argmin: {report.mode_contains_argmin(N)}")
    for flag in report.flags:
        print(f"exit-measure: note: {flag}")
    return 0


def _cmd_selftest(cfg: RunConfig, out: Path) -> int:
    checks: list[tuple[str, bool, str]] = []

    def record(name: str, ok: bool, detail: str = "") -> None:
        checks.append((name, bool(ok), detail))
        print(f"{'ok' if ok else 'FAIL':4s} {name}"
              + (f"  [{detail}]" if detail and not ok else ""))

    for mi, (name, params) in enumerate(_SELFTEST_PARAMS.items()):
        model = build_model(name, params)
        record(f"{name}: positive span", check_positive_span(model))

        trace = trace_boundary(model)
        viol = characteristic_check(model, trace)
        record(f"{name}: boundary tangency {viol:.1e}", viol <= 1e-3,
               f"violation {viol}")

        rng = np.random.Generator(np.random.Philox(key=_derive_seed(
            cfg.seed, 100 + mi)))
        pts = sample_domain(model, rng, 25, margin=0.02)
        worst = 0.0
        for z in pts:
            y = rng.normal(scale=0.3, size=model.d)
            val, _ = lagrangian(model, z, y)
            if not np.isfinite(val):
                continue
            mu = velocity_decomposition(model, z, y)
            beta = model._rates_all(z)
            direct = float(np.sum(relative_entropy_f(mu, beta)))
            worst = max(worst, abs(direct - val),
                        float(np.abs(mu @ model.jumps.astype(float)
                                     - y).max()))
        record(f"{name}: duality gap {worst:.1e}", worst <= 1e-8)

        horizon = 50_000 / (200 * 4.0)
        path = simulate(model, 200, model.endemic, horizon, reflect=True,
                        stop="at_horizon", seed=_derive_seed(cfg.seed, 77))
        inside = all(in_domain(model.domain, z) for z in path.states[::50])
        record(f"{name}: reflected containment ({len(path.times)} events)",
               inside)

    model = build_model("sirs", _SELFTEST_PARAMS["sirs"])
    z0 = np.asarray(model.endemic) + np.array([0.05, -0.05])
    smooth = integrate_ode(lambda z: drift(model, z), z0, (0.0, 40.0),
                           grid=np.linspace(0.0, 40.0, 2001))
    act = path_action(model, smooth)
    record(f"sirs: drift path action {act.value:.1e}", act.value <= 1e-6)

    recs_a, cens_a = exit_experiment(model, 60, model.endemic, 20, 400.0,
                                     _derive_seed(cfg.seed, 5))
    recs_b, cens_b = exit_experiment(model, 60, model.endemic, 20, 400.0,
                                     _derive_seed(cfg.seed, 5))
    same = cens_a == cens_b and len(recs_a) == len(recs_b) and all(
        ra.tau == rb.tau and np.array_equal(ra.location, rb.location)
        for ra, rb in zip(recs_a, recs_b))
    record("exit experiment determinism", same)

    failures = [c for c in checks if not c[1]]
    files = [out / "selftest.json"]
    files[0].write_text(
        json.dumps({"checks": [{"name": n, "ok": ok, "detail": d}
                               for n, ok, d in checks],
                    "failures": len(failures)},
                   sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _emit_manifest(out, files, cfg, {"checks": len(checks),
                                     "failures": len(failures)})
    print(f"selftest: {len(checks) - len(failures)}/{len(checks)} checks "
          f"passed")
    return 0 if not failures else 1


_HANDLERS = {
    "simulate": _cmd_simulate,
    "lln-check": _cmd_lln_check,
    "basin": _cmd_basin,
    "minpath": _cmd_minpath,
    "profile": _cmd_profile,
    "exit-measure": _cmd_exit_measure,
    "selftest": _cmd_selftest,
}


def dispatch(argv=None) -> int:
    """Parse argv, run the selected command, and return an exit status."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_file(args.config) if args.config else None
        cfg = resolve(args.command, file_cfg, _flags(args))
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return _HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExitlabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
