"""Monte Carlo exit-measure experiments tied to the quasipotential profile.

run_exit_measure samples exit locations of the chain at a ladder of
population sizes N, projects each exit onto the characteristic-boundary
trace by nearest vertex, bins the arclength coordinate, and joins the
binned empirical law with the quasipotential profile computed along the
same trace.  scaling_estimate fits the exponential decay rate of an
event probability against N with a bootstrap confidence interval.
write_report serializes a report to JSON, CSV, and PNG files under a
content-hash manifest; a rerun with the same seed and version is
bit-identical.

Everything here is deterministic given (inputs, master seed): per-N
batches draw from seeds derived by counter from the master, replicas
use counter-based streams inside ssa.exit_experiment, and the bootstrap
uses its own derived stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .basin import BoundaryTrace, TraceLocator, trace_boundary
from .errors import InsufficientData, IoFailure
from .models import ModelSpec
from .quasipotential import ProfileTable, boundary_profile
from .ssa import ExitRecord, exit_experiment

__all__ = [
    "ExitBatch",
    "ExitMeasureReport",
    "ScalingFit",
    "run_exit_measure",
    "scaling_estimate",
    "write_report",
    "NEAR_CRITICAL_SIRS",
]

DEFAULT_DELTA = 0.1
DEFAULT_BIN_WIDTH = 0.02

# Scaling-study preset: contact rate just above the extinction threshold
# (reproduction number 1.15), so that exit events at modest N are frequent
# enough to resolve the decay rates of off-minimizer exit probabilities.
NEAR_CRITICAL_SIRS = {
    "name": "sirs",
    "params": {"lambda": 1.15, "gamma": 1.0, "rho": 1.0},
}


@dataclass(frozen=True)
class ExitBatch:
    """Exit statistics for one population size N.

    counts holds the arclength histogram of the exits that landed on
    the characteristic boundary; exits through other faces of the
    domain sit in other_boundary and are excluded from the histogram,
    so counts.sum() + other_boundary + censored == replicas.  s_values
    aligns with records and carries each exit's nearest-vertex
    arclength; on_trace marks which of them are characteristic.
    """

    N: int
    replicas: int
    censored: int
    records: tuple
    s_values: np.ndarray
    on_trace: np.ndarray
    counts: np.ndarray
    fraction_near: float
    fraction_stderr: float
    mode_bin: int

    @property
    def n_exits(self) -> int:
        return int(self.on_trace.sum())

    @property
    def other_boundary(self) -> int:
        return int(len(self.records) - self.on_trace.sum())


@dataclass(frozen=True)
class ExitMeasureReport:
    """Joined empirical/theoretical exit measure across population sizes."""

    model_name: str
    params: dict
    z0: np.ndarray
    N_list: tuple
    replicas: int
    delta: float
    bin_width: float
    horizon: float
    seed: int
    reflect: bool
    bin_edges: np.ndarray
    s_attractor: float
    arclength_total: float
    batches: dict
    profile: ProfileTable
    theory: dict
    flags: tuple

    def batch(self, N: int) -> ExitBatch:
        return self.batches[int(N)]

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def mode_interval(self, N: int) -> tuple:
        b = self.batch(N)
        return (float(self.bin_edges[b.mode_bin]),
                float(self.bin_edges[b.mode_bin + 1]))

    def mode_contains_argmin(self, N: int) -> bool:
        """Does N's modal histogram bin bracket the profile argmin?"""
        lo, hi = self.mode_interval(N)
        s_star = float(self.theory["argmin_s"])
        return lo <= s_star < hi

    def as_dict(self) -> dict:
        per_n = {}
        for N in self.N_list:
            b = self.batch(N)
            per_n[str(N)] = {
                "replicas": b.replicas,
                "n_exits": b.n_exits,
                "censored": b.censored,
                "other_boundary": b.other_boundary,
                "counts": b.counts.tolist(),
                "fraction_near": _none_if_nan(b.fraction_near),
                "fraction_stderr": _none_if_nan(b.fraction_stderr),
                "mode_bin": int(b.mode_bin),
                "mode_interval": list(self.mode_interval(N)),
            }
        return {
            "version": __version__,
            "model": self.model_name,
            "params": dict(self.params),
            "z0": self.z0.tolist(),
            "N_list": [int(n) for n in self.N_list],
            "replicas": int(self.replicas),
            "delta": float(self.delta),
            "bin_width": float(self.bin_width),
            "horizon": float(self.horizon),
            "seed": int(self.seed),
            "reflect": bool(self.reflect),
            "bin_edges": self.bin_edges.tolist(),
            "s_attractor": float(self.s_attractor),
            "arclength_total": float(self.arclength_total),
            "per_N": per_n,
            "theory": {k: _jsonable(v) for k, v in self.theory.items()},
            "flags": list(self.flags),
        }


def _none_if_nan(x: float):
    return None if math.isnan(x) else float(x)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _derive_seed(master: int, index: int) -> int:
    """Counter-derived 64-bit child seed for batch `index`."""
    state = np.random.SeedSequence(entropy=master, spawn_key=(index,))
    return int(state.generate_state(1, np.uint64)[0])


def _nearest_vertex_arclength(locator: TraceLocator, arc: np.ndarray, p):
    """Arclength of the trace vertex nearest to p, plus the distance."""
    s, d, idx = locator.query(p)
    p = np.asarray(p, dtype=float)
    poly = locator.trace.polyline
    cand = (idx, idx + 1)
    dv = [float(np.linalg.norm(p - poly[c])) for c in cand]
    best = cand[int(np.argmin(dv))]
    return float(arc[best]), abs(d)


def _bin_edges(bin_width: float, s_attractor: float, total: float) -> np.ndarray:
    """Uniform bins covering [0, total] with one bin centered at s_attractor.

    Centering a bin on the expected concentration point keeps the modal
    bin stable: an edge placed at the peak would split the mass between
    two bins and let sampling noise pick the winner.
    """
    w = float(bin_width)
    n_left = math.floor(s_attractor / w + 0.5)
    e0 = s_attractor - (n_left + 0.5) * w
    n_bins = int(math.ceil((total - e0) / w - 1e-12))
    return e0 + w * np.arange(n_bins + 1)


def _batch_worker(args):
    model, N, z0, replicas, horizon, batch_seed, reflect = args
    return exit_experiment(model, N, z0, replicas, horizon, batch_seed,
                           reflect=reflect)


def run_exit_measure(model: ModelSpec, z0, N_list, replicas: int,
                     delta: float = DEFAULT_DELTA, horizon: float = 1000.0,
                     seed: int = 0, *, bin_width: float = DEFAULT_BIN_WIDTH,
                     reflect: bool = True, trace: BoundaryTrace | None = None,
                     profile: ProfileTable | None = None,
                     profile_stride: int | None = None,
                     profile_M: int = 31, profile_refine: int = 0,
                     jobs: int = 1, n_boot: int = 200) -> ExitMeasureReport:
    """Empirical exit measure across N, joined with the boundary profile.

    For each N (ascending, each batch seeded by counter from the master
    seed) runs `replicas` independent exit simulations, projects the
    exit locations onto the boundary trace by nearest vertex, bins the
    arclength coordinate (bin grid shared across N, one bin centered on
    the boundary attractor), and records the fraction of exits within
    `delta` arclength of the attractor together with its bootstrap
    standard error and the modal bin.  Exits farther from the trace
    than one lattice diagonal plus the tracer tolerance are counted in
    a separate other-boundary bucket, possible only for free runs
    through the non-characteristic faces.

    The theory side is a quasipotential profile along the same trace
    (computed here unless one is passed in), exposed per bin center by
    linear interpolation under the "bin_S" key.  replicas >= 100 is
    recommended for stable fractions.
    """
    N_list = [int(n) for n in N_list]
    if not N_list:
        raise ValueError("N_list must be nonempty")
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be strictly ascending")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if trace is None:
        trace = trace_boundary(model)
    locator = TraceLocator(trace)
    arc = trace.arclength
    total = float(arc[-1])
    s_attr, _ = _nearest_vertex_arclength(locator, arc, model.boundary_attractor)
    edges = _bin_edges(bin_width, s_attr, total)

    if profile is None:
        stride = profile_stride
        if stride is None:
            stride = max(1, len(trace.polyline) // 16)
        profile = boundary_profile(model, trace, stride=stride,
                                   M=profile_M, refine=profile_refine)

    tasks = [(model, N, z0, replicas, horizon, _derive_seed(seed, bi), reflect)
             for bi, N in enumerate(N_list)]
    if jobs > 1 and len(N_list) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            raw = list(pool.map(_batch_worker, tasks))
    else:
        raw = [_batch_worker(t) for t in tasks]

    flags: list[str] = []
    batches: dict[int, ExitBatch] = {}
    for bi, N in enumerate(N_list):
        records, censored = raw[bi]
        svals = np.empty(len(records))
        on_trace = np.empty(len(records), dtype=bool)
        band = math.sqrt(2.0) / N + trace.tolerance
        for i, rec in enumerate(records):
            s, dist = _nearest_vertex_arclength(locator, arc, rec.location)
            svals[i] = s
            on_trace[i] = dist <= band
        s_char = svals[on_trace]
        counts, _ = np.histogram(s_char, bins=edges)
        near = np.abs(s_char - s_attr) < delta
        if len(s_char):
            frac = float(near.mean())
            rng = np.random.Generator(
                np.random.Philox(key=_derive_seed(seed, 10_000 + bi)))
            boot = rng.binomial(len(s_char), frac, size=n_boot) / len(s_char)
            stderr = float(boot.std(ddof=1))
            mode_bin = int(np.argmax(counts))
        else:
            frac, stderr, mode_bin = math.nan, math.nan, 0
            flags.append(f"N={N}: no exits on the characteristic boundary")
        if censored > 0.5 * replicas:
            flags.append(f"N={N}: censored-dominated ({censored}/{replicas})")
        n_other = int(len(records) - on_trace.sum())
        if n_other:
            flags.append(f"N={N}: {n_other} exits through other boundary faces")
        batches[N] = ExitBatch(
            N=N, replicas=replicas, censored=censored,
            records=tuple(records), s_values=svals, on_trace=on_trace,
            counts=counts, fraction_near=frac, fraction_stderr=stderr,
            mode_bin=mode_bin,
        )

    fin = np.isfinite(profile.value)
    centers = 0.5 * (edges[:-1] + edges[1:])
    bin_s_theory = np.interp(centers, profile.s[fin], profile.excess[fin])
    theory = {
        "V_boundary": float(np.nanmin(profile.value)),
        "argmin_s": float(profile.s[profile.argmin_index]),
        "argmin_point": profile.argmin_point.tolist(),
        "attractor_distance": float(profile.attractor_distance),
        "profile_gaps": list(profile.gaps),
        "bin_S": bin_s_theory,
    }
    return ExitMeasureReport(
        model_name=model.name, params=dict(model.params),
        z0=np.asarray(z0, dtype=float), N_list=tuple(N_list),
        replicas=replicas, delta=delta, bin_width=bin_width,
        horizon=horizon, seed=seed, reflect=reflect,
        bin_edges=edges, s_attractor=s_attr, arclength_total=total,
        batches=batches, profile=profile, theory=theory,
        flags=tuple(flags),
    )


@dataclass(frozen=True)
class ScalingFit:
    """Least-squares fit of -log(empirical probability) against N."""

    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    per_N: tuple
    dropped_N: tuple
    n_boot: int

    def as_dict(self) -> dict:
        return {
            "slope": float(self.slope),
            "intercept": float(self.intercept),
            "ci_low": float(self.ci_low),
            "ci_high": float(self.ci_high),
            "per_N": [list(map(float, row)) for row in self.per_N],
            "dropped_N": [int(n) for n in self.dropped_N],
            "n_boot": int(self.n_boot),
        }


def scaling_estimate(report: ExitMeasureReport, event, *,
                     n_boot: int = 200, seed: int | None = None) -> ScalingFit:
    """Empirical decay rate of P(event) as N grows.

    event is a predicate on ExitRecord; censored replicas count as
    non-events.  Fits -log(count/replicas) against N by least squares
    over the N with nonzero counts (zero-count N are reported in
    dropped_N, and fewer than three usable N raises InsufficientData).
    The confidence interval is a percentile bootstrap over n_boot
    binomial resamples of the per-N counts, resamples that lose usable
    points refit on what remains.
    """
    rows = []
    dropped = []
    for N in report.N_list:
        b = report.batch(N)
        count = sum(1 for rec in b.records if event(rec))
        rows.append((N, count, b.replicas, count / b.replicas))
        if count == 0:
            dropped.append(N)
    usable = [(N, c, t) for N, c, t, _ in rows if c > 0]
    if len(usable) < 3:
        raise InsufficientData(
            f"need >= 3 population sizes with nonzero event counts, "
            f"have {len(usable)} (dropped: {dropped})")

    Ns = np.array([u[0] for u in usable], dtype=float)
    p_hat = np.array([u[1] / u[2] for u in usable])
    slope, intercept = np.polyfit(Ns, -np.log(p_hat), 1)

    if seed is None:
        seed = _derive_seed(report.seed, 777)
    rng = np.random.Generator(np.random.Philox(key=seed))
    totals = np.array([u[2] for u in usable])
    slopes = np.full(n_boot, np.nan)
    for i in range(n_boot):
        counts = rng.binomial(totals, p_hat)
        keep = counts > 0
        if keep.sum() < 2:
            continue
        slopes[i] = np.polyfit(Ns[keep], -np.log(counts[keep] / totals[keep]),
                               1)[0]
    lo, hi = np.nanpercentile(slopes, [2.5, 97.5])
    return ScalingFit(
        slope=float(slope), intercept=float(intercept),
        ci_low=float(lo), ci_high=float(hi),
        per_N=tuple(rows), dropped_N=tuple(dropped), n_boot=n_boot,
    )


# ----------------------------------------------------------------------
# serialization

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_report(report: ExitMeasureReport, out_dir, *,
                 config: dict | None = None) -> dict:
    """Write report.json, histogram.csv, profile.csv, exits.csv, figures,
    and a manifest.json carrying sha256 content hashes of all of them.

    The manifest is written last and lists exactly the emitted files;
    rerunning with the same seed and version reproduces every byte.
    `config`, when given, is echoed verbatim into the manifest so a run
    can be reproduced from the manifest alone.  Raises IoFailure on any
    filesystem error.
    """
    if not report.N_list:
        raise ValueError("report has an empty N_list; nothing to write")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = []

        p = out / "report.json"
        p.write_text(json.dumps(report.as_dict(), sort_keys=True, indent=2)
                     + "\n", encoding="utf-8")
        files.append(p)

        p = out / "histogram.csv"
        centers = report.bin_centers
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "bin_s", "bin_count"])
            for N in report.N_list:
                for c, cnt in zip(centers, report.batch(N).counts):
                    w.writerow([N, f"{c:.12g}", int(cnt)])
        files.append(p)

        p = out / "profile.csv"
        report.profile.to_csv(p)
        files.append(p)

        p = out / "exits.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["replica", "N", "seed", "tau", "exit_x", "exit_y",
                        "mode", "censored"])
            for N in report.N_list:
                b = report.batch(N)
                for r in b.records:
                    w.writerow([r.replica, r.N, r.seed, f"{r.tau:.12g}",
                                f"{r.location[0]:.12g}",
                                f"{r.location[1]:.12g}", r.mode, 0])
                for _ in range(b.censored):
                    w.writerow(["", N, "", "", "", "", "", 1])
        files.append(p)

        from . import figures
        p = out / "histogram.png"
        figures.render_exit_histogram(report, p)
        files.append(p)
        p = out / "profile.png"
        figures.render_profile(report.profile, p,
                               s_attractor=report.s_attractor)
        files.append(p)

        manifest = {
            "version": __version__,
            "model": report.model_name,
            "seed": int(report.seed),
            "files": {
                f.name: {"sha256": _sha256(f), "bytes": f.stat().st_size}
                for f in sorted(files, key=lambda f: f.name)
            },
        }
        if config is not None:
            manifest["config"] = config
        (out / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
        return manifest
    except OSError as exc:
        raise IoFailure(f"failed writing report to {out}: {exc}") from exc
