"""Deterministic-flow utilities.

Everything here concerns the fluid limit z' = b(z): adaptive
integration, classifying which attractor a point flows to, tracing the
basin boundary (the separatrix through the interior saddle for the
bistable models, the invariant axis {x=0} for the others), and checking
that the traced boundary is characteristic (<b, n> = 0 along it).

The separatrix is computed by growing the saddle's stable manifold in
reversed time from two seeds straddling the saddle along the stable
eigenvector.  A fan-of-transversals construction (bisecting basin
classifications along chords) is available as an independent
cross-check; it is far slower per vertex, so the manifold route is the
default.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import StepUnderflow, TraceFailure
from .models import ModelSpec, drift_jacobian

__all__ = [
    "SmoothPath",
    "BoundaryTrace",
    "integrate_ode",
    "classify_basin",
    "trace_boundary",
    "characteristic_check",
    "TraceLocator",
    "trace_to_csv",
]

DEFAULT_REL_TOL = 1e-8
DEFAULT_ABS_TOL = 1e-10
DEFAULT_RESOLUTION = 1e-4


@dataclass(frozen=True)
class SmoothPath:
    """A time-parametrized path with optional controls and adjoints."""

    grid: np.ndarray
    points: np.ndarray
    controls: np.ndarray | None = None
    adjoints: np.ndarray | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        points = np.asarray(self.points, dtype=float)
        if len(grid) != len(points):
            raise ValueError("grid and points must have equal length")
        if len(grid) > 1 and not np.all(np.diff(grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if self.controls is not None and np.any(np.asarray(self.controls) < 0):
            raise ValueError("controls must be componentwise nonnegative")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "points", points)

    @property
    def T(self) -> float:
        if len(self.grid) < 2:
            return 0.0
        return float(self.grid[-1] - self.grid[0])


@dataclass(frozen=True)
class BoundaryTrace:
    """Polyline approximation of the characteristic boundary.

    normals are unit vectors pointing outward (away from the endemic
    equilibrium's basin); tolerance bounds the positional uncertainty of
    the polyline, so points closer than that cannot be reliably sided.
    """

    polyline: np.ndarray  # (n, 2)
    normals: np.ndarray  # (n, 2), unit norm
    tolerance: float

    def __post_init__(self):
        poly = np.asarray(self.polyline, dtype=float)
        nrm = np.asarray(self.normals, dtype=float)
        if poly.shape != nrm.shape:
            raise ValueError("polyline and normals must have the same shape")
        lens = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-9):
            raise ValueError("normals must have unit norm")
        object.__setattr__(self, "polyline", poly)
        object.__setattr__(self, "normals", nrm)

    @property
    def arclength(self) -> np.ndarray:
        """Cumulative arclength coordinate of each vertex."""
        seg = np.linalg.norm(np.diff(self.polyline, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])


def integrate_ode(field, z0, t_span, rel_tol: float = DEFAULT_REL_TOL,
                  abs_tol: float = DEFAULT_ABS_TOL, grid=None) -> SmoothPath:
    """Adaptive RK45 solution of z' = field(z) as a SmoothPath.

    field maps a state vector to a velocity vector.  When grid is given,
    the dense output is evaluated there; otherwise the solver's own
    accepted steps form the grid.  Raises StepUnderflow if the
    integrator cannot advance.
    """
    z0 = np.asarray(z0, dtype=float)
    t_a, t_b = float(t_span[0]), float(t_span[1])
    if not t_a < t_b:
        raise ValueError("t_span must satisfy t_a < t_b")
    sol = solve_ivp(
        lambda t, z: field(z), (t_a, t_b), z0,
        method="RK45", rtol=rel_tol, atol=abs_tol,
        dense_output=grid is not None,
    )
    if not sol.success:
        raise StepUnderflow(sol.message, t=float(sol.t[-1]), z=sol.y[:, -1].copy())
    if grid is None:
        return SmoothPath(grid=sol.t, points=sol.y.T)
    grid = np.asarray(grid, dtype=float)
    return SmoothPath(grid=grid, points=sol.sol(grid).T)


def classify_basin(model: ModelSpec, z, t_max: float = 500.0,
                   eps: float = 1e-3) -> str:
    """Which attractor the drift flow from z converges to.

    Returns "endemic" once the flow enters the eps-ball of the endemic
    equilibrium, "boundary" for the eps-ball of the disease-free
    equilibrium, "undecided" if neither happens by t_max.
    """
    z = np.asarray(z, dtype=float)
    targets = (model.endemic, model.disease_free)
    labels = ("endemic", "boundary")
    for tgt, lab in zip(targets, labels):
        if np.linalg.norm(z - tgt) <= eps:
            return lab

    def near_endemic(t, y):
        return np.linalg.norm(y - model.endemic) - eps

    def near_dfe(t, y):
        return np.linalg.norm(y - model.disease_free) - eps

    near_endemic.terminal = True
    near_dfe.terminal = True
    sol = solve_ivp(
        lambda t, y: model._rates_all(y) @ model.jumps.astype(float),
        (0.0, t_max), z, method="RK45",
        rtol=DEFAULT_REL_TOL, atol=DEFAULT_ABS_TOL,
        events=[near_endemic, near_dfe],
    )
    if sol.t_events[0].size:
        return "endemic"
    if sol.t_events[1].size:
        return "boundary"
    return "undecided"


# ----------------------------------------------------------------------
# boundary tracing

def trace_boundary(model: ModelSpec, resolution: float = DEFAULT_RESOLUTION,
                   method: str = "manifold") -> BoundaryTrace:
    """Trace the characteristic boundary as a polyline.

    Axis-type models return the segment {x = 0} with outward normal
    (-1, 0).  Bistable models trace the separatrix through the saddle:
    by reversed-time integration of the saddle's stable manifold
    (method="manifold", the default) or by bisecting basin
    classifications along a fan of transversal chords (method="fan").
    Consecutive vertices are at most `resolution` apart and the saddle
    lies on the trace.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if model.domain.exit_boundary == "axis":
        cap = model.domain.cap
        n = int(np.ceil(cap / resolution)) + 1
        ys = np.linspace(0.0, cap, n)
        poly = np.column_stack([np.zeros(n), ys])
        normals = np.tile([-1.0, 0.0], (n, 1))
        return BoundaryTrace(polyline=poly, normals=normals, tolerance=resolution)
    if method == "manifold":
        return _trace_manifold(model, resolution)
    if method == "fan":
        return _trace_fan(model, resolution)
    raise ValueError(f"unknown tracing method {method!r}")


def _stable_eigvec(model: ModelSpec):
    A = drift_jacobian(model, model.boundary_attractor)
    eigvals, eigvecs = np.linalg.eig(A)
    if np.abs(eigvals.imag).max() > 1e-10:
        raise TraceFailure(
            f"saddle spectrum is not real: {eigvals}", segment=None
        )
    i_s = int(np.argmin(eigvals.real))
    if eigvals.real[i_s] >= 0 or eigvals.real.max() <= 0:
        raise TraceFailure(
            f"boundary attractor is not a saddle: eigenvalues {eigvals.real}",
            segment=None,
        )
    v = eigvecs[:, i_s].real
    return v / np.linalg.norm(v)


def _trace_manifold(model: ModelSpec, resolution: float) -> BoundaryTrace:
    zbar = model.boundary_attractor
    v_s = _stable_eigvec(model)
    Hf = model.jumps.astype(float)
    cap = model.domain.cap

    def rhs(t, u):
        v = -(model._rates_all(u[:2]) @ Hf)
        return np.array([v[0], v[1], np.linalg.norm(v)])

    def ev_x(t, u):
        return u[0]

    def ev_y(t, u):
        return u[1]

    def ev_cap(t, u):
        return cap - u[0] - u[1]

    def ev_stall(t, u):
        return np.linalg.norm(model._rates_all(u[:2]) @ Hf) - 1e-9

    for ev in (ev_x, ev_y, ev_cap, ev_stall):
        ev.terminal = True
        ev.direction = -1

    delta = 1e-6
    branches = []
    for sgn in (1.0, -1.0):
        z0 = zbar + sgn * delta * v_s
        sol = solve_ivp(
            rhs, (0.0, 5000.0), np.array([z0[0], z0[1], 0.0]),
            method="RK45", rtol=1e-10, atol=1e-12,
            events=[ev_x, ev_y, ev_cap, ev_stall], dense_output=True,
        )
        if not sol.success:
            raise TraceFailure(
                f"separatrix integration failed: {sol.message}",
                segment=(z0.tolist(), sol.y[:2, -1].tolist()),
            )
        s_of_t = sol.y[2]
        total = s_of_t[-1]
        if total < 10 * resolution:
            raise TraceFailure(
                "separatrix branch is degenerately short",
                segment=(z0.tolist(), sol.y[:2, -1].tolist()),
            )
        n_pts = int(np.ceil(total / (0.9 * resolution))) + 1
        s_targets = np.linspace(0.0, total, n_pts)
        t_targets = np.interp(s_targets, s_of_t, sol.t)
        pts = sol.sol(t_targets)[:2].T
        branches.append(pts)

    poly = np.vstack([branches[1][::-1], zbar[None, :], branches[0]])
    # collapse any vertices that coincide to within numerical noise
    keep = np.ones(len(poly), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(poly, axis=0), axis=1) > 1e-12
    poly = poly[keep]
    normals = _polyline_normals(poly, model.endemic)
    # positional uncertainty: chord sagitta of the sampled polyline plus
    # integrator error; this is what bounds how close to the polyline a
    # side-of-boundary query can still be trusted
    sagitta = np.linalg.norm(
        poly[1:-1] - 0.5 * (poly[:-2] + poly[2:]), axis=1
    ).max() if len(poly) > 2 else 0.0
    tol = max(2.0 * sagitta, 1e-8)
    return BoundaryTrace(polyline=poly, normals=normals, tolerance=tol)


def _trace_fan(model: ModelSpec, resolution: float,
               n_rays: int = 64) -> BoundaryTrace:
    """Fan construction: bisect basin classifications along chords.

    Rays leave a small circle around the endemic equilibrium; where a
    ray's far end classifies to the disease-free attractor, the
    bracketing segment is bisected until its width is below resolution.
    """
    z_star = model.endemic
    zbar = model.boundary_attractor
    cap = model.domain.cap
    r0 = 0.02 * cap

    def classify(p):
        if not (p[0] >= 0 and p[1] >= 0 and p[0] + p[1] <= cap):
            return "outside"
        return classify_basin(model, p)

    # seed the fan from the saddle direction so rays cross the separatrix
    base_angle = np.arctan2(zbar[1] - z_star[1], zbar[0] - z_star[0])
    angles = base_angle + np.linspace(-np.pi, np.pi, n_rays, endpoint=False)
    points = []
    for ang in angles:
        u = np.array([np.cos(ang), np.sin(ang)])
        inner = z_star + r0 * u
        if classify(inner) != "endemic":
            continue
        # walk outward until the classification flips or the ray leaves A
        t_lo, lab_hi, t_hi = r0, None, None
        t = r0
        while True:
            t_next = t + max(4 * resolution, 0.02 * cap)
            p = z_star + t_next * u
            lab = classify(p)
            if lab in ("boundary", "outside"):
                lab_hi, t_hi = lab, t_next
                break
            if lab == "endemic":
                t_lo = t_next
            t = t_next
            if t > 3 * cap:
                break
        if t_hi is None or lab_hi == "outside":
            continue
        seg = (z_star + t_lo * u, z_star + t_hi * u)
        la, lb = classify(seg[0]), classify(seg[1])
        if la == lb:
            raise TraceFailure(
                "transversal endpoints classify identically",
                segment=(seg[0].tolist(), seg[1].tolist()),
            )
        while t_hi - t_lo > resolution:
            t_mid = 0.5 * (t_lo + t_hi)
            if classify(z_star + t_mid * u) == "endemic":
                t_lo = t_mid
            else:
                t_hi = t_mid
        points.append(z_star + 0.5 * (t_lo + t_hi) * u)

    if len(points) < 3:
        raise TraceFailure(
            f"fan produced only {len(points)} separatrix points", segment=None
        )
    pts = np.array(points)
    # order by angle around the endemic point, then thread the saddle in
    order = np.argsort(np.arctan2(pts[:, 1] - z_star[1], pts[:, 0] - z_star[0]))
    pts = pts[order]
    d_to_saddle = np.linalg.norm(pts - zbar, axis=1)
    j = int(np.argmin(d_to_saddle))
    if d_to_saddle[j] > max(resolution, 0.05 * cap):
        pts = np.insert(pts, j, zbar, axis=0)
    else:
        pts[j] = zbar
    normals = _polyline_normals(pts, model.endemic)
    return BoundaryTrace(polyline=pts, normals=normals, tolerance=resolution)


def _polyline_normals(poly: np.ndarray, z_star: np.ndarray) -> np.ndarray:
    """Unit normals from finite-difference tangents, oriented away from
    the endemic equilibrium with sign continuity along the curve."""
    tang = np.empty_like(poly)
    tang[1:-1] = poly[2:] - poly[:-2]
    tang[0] = poly[1] - poly[0]
    tang[-1] = poly[-1] - poly[-2]
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normals = np.column_stack([-tang[:, 1], tang[:, 0]])
    # anchor the sign at the vertex nearest the curve's "center" and
    # propagate by continuity (a simple curve cannot flip sides)
    i0 = int(np.argmin(np.linalg.norm(poly - z_star, axis=1)))
    if np.dot(normals[i0], z_star - poly[i0]) > 0:
        normals[i0] = -normals[i0]
    for i in range(i0 + 1, len(poly)):
        if np.dot(normals[i], normals[i - 1]) < 0:
            normals[i] = -normals[i]
    for i in range(i0 - 1, -1, -1):
        if np.dot(normals[i], normals[i + 1]) < 0:
            normals[i] = -normals[i]
    return normals


def characteristic_check(model: ModelSpec, trace: BoundaryTrace) -> float:
    """max over trace vertices of |<b, n>| / max(|b|, 1e-12)."""
    b = model._rates_all(trace.polyline) @ model.jumps.astype(float)
    num = np.abs(np.einsum("ij,ij->i", b, trace.normals))
    den = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return float((num / den).max())


class TraceLocator:
    """Nearest-segment queries against a BoundaryTrace polyline.

    query() supports a warm-start hint so that a slowly moving caller
    (the jump-process kernel) pays O(window) rather than O(n) per event.
    Signed distance is positive on the outward (normal) side.
    """

    def __init__(self, trace: BoundaryTrace):
        self.trace = trace
        p = trace.polyline
        self.a = p[:-1]
        self.seg = p[1:] - p[:-1]
        self.len2 = np.einsum("ij,ij->i", self.seg, self.seg)
        self.len2[self.len2 == 0] = 1e-300
        self.cum_s = trace.arclength
        self.normals = trace.normals
        self.n_seg = len(self.a)

    def _best_in(self, p: np.ndarray, lo: int, hi: int):
        a = self.a[lo:hi]
        seg = self.seg[lo:hi]
        t = np.clip(np.einsum("ij,ij->i", p - a, seg) / self.len2[lo:hi], 0.0, 1.0)
        proj = a + t[:, None] * seg
        d2 = np.einsum("ij,ij->i", p - proj, p - proj)
        i = int(np.argmin(d2))
        return i + lo, t[i], proj[i], float(np.sqrt(d2[i]))

    def query(self, p, hint: int | None = None):
        """Returns (arclength s, signed distance, segment index)."""
        p = np.asarray(p, dtype=float)
        if hint is None:
            idx, t, proj, dist = self._best_in(p, 0, self.n_seg)
        else:
            w = 64
            while True:
                lo = max(0, hint - w)
                hi = min(self.n_seg, hint + w)
                idx, t, proj, dist = self._best_in(p, lo, hi)
                at_edge = (idx == lo and lo > 0) or (idx == hi - 1 and hi < self.n_seg)
                if not at_edge or (lo == 0 and hi == self.n_seg):
                    break
                w *= 4
        s = self.cum_s[idx] + t * np.sqrt(self.len2[idx])
        n = self.normals[idx]
        sign = 1.0 if np.dot(p - proj, n) >= 0 else -1.0
        return float(s), sign * dist, idx

    def query_many(self, P):
        """Vectorized full-scan queries; returns (s, signed_dist) arrays."""
        P = np.asarray(P, dtype=float)
        out_s = np.empty(len(P))
        out_d = np.empty(len(P))
        for i, p in enumerate(P):
            s, d, _ = self.query(p)
            out_s[i] = s
            out_d[i] = d
        return out_s, out_d


def trace_to_csv(trace: BoundaryTrace, path) -> None:
    """Write the trace as CSV with columns s, x, y, nx, ny."""
    s = trace.arclength
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "x", "y", "nx", "ny"])
        for i in range(len(s)):
            w.writerow([f"{s[i]:.12g}",
                        f"{trace.polyline[i, 0]:.12g}",
                        f"{trace.polyline[i, 1]:.12g}",
                        f"{trace.normals[i, 0]:.12g}",
                        f"{trace.normals[i, 1]:.12g}"])
