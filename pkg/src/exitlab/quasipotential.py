"""Quasipotential solvers: Hamiltonian shooting plus a discrete minimizer.

The minimum large-deviation cost V(z*, y) of forcing the process from
the endemic equilibrium to a target point is computed by two
independent routes.  The primary route integrates the extremal
(state, adjoint) system that minimum-cost paths satisfy, launching from
the unstable manifold of the fixed point (z*, 0) and tuning the launch
angle until the orbit lands on (target, 0).  The oracle route minimizes
the discretized action integral over free interior path nodes.  The two
share no code beyond the rate functions, so agreement of their values
is the main correctness check for both.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from math import exp

import numpy as np
from scipy.integrate import solve_bvp, solve_ivp
from scipy.optimize import minimize, minimize_scalar

from .action import lagrangian_many, relative_entropy_f
from .basin import BoundaryTrace, SmoothPath
from .errors import (
    DegenerateSpectrum,
    ExitlabError,
    NoConnection,
    NonConvergence,
)
from .models import ModelSpec, _require_in_domain, drift, drift_jacobian

DEFAULT_EPSILON = 1e-4
DEFAULT_SEEDS = 64
DEFAULT_RESIDUAL_TOL = 1e-4
DEFAULT_R_CAP = 25.0
DEFAULT_T_CAP = 400.0
FREE_T_RANGE = (0.5, 200.0)
_EQUILIBRIUM_TOL = 1e-7
_INTERIOR_MARGIN = 1e-7  # keeps optimizer nodes where every rate is positive


# ----------------------------------------------------------------------
# Hamiltonian vector field

@dataclass(frozen=True)
class HamiltonianPoint:
    """A point (z, r) of the extremal system: state plus adjoint."""

    z: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))


def hamiltonian_rhs(model: ModelSpec, p: HamiltonianPoint):
    """Right-hand side (dz/dt, dr/dt) of the extremal system.

    dz/dt = sum_j e^{<r,h_j>} beta_j(z) h_j and
    dr/dt = sum_j (1 - e^{<r,h_j>}) grad beta_j(z); at r = 0 these
    collapse to (b(z), 0), so drift orbits are the zero-cost extremals.
    """
    H = model.jumps.astype(float)
    beta = model._rates_all(p.z)
    grads = model._grads_all(p.z)
    ew = np.exp(H @ p.r)
    dz = (beta * ew) @ H
    dr = (1.0 - ew) @ grads
    return dz, dr


def _ext_sirs(params, k):
    lam, g, rho = params["lambda"], params["gamma"], params["rho"]

    def rhs(t, u):
        x, y, p, q = u[0], u[1], u[2], u[3]
        b1, b2, b3 = lam * x * y, g * x, rho * (1.0 - x - y)
        e1, e2, e3 = exp(p - q), exp(-p), exp(q)
        m1, m2, m3 = b1 * e1, b2 * e2, b3 * e3
        f1, f2, f3 = 1.0 - e1, 1.0 - e2, 1.0 - e3
        dx = m1 - m2
        dy = m3 - m1
        dp = f1 * lam * y + f2 * g - f3 * rho
        dq = f1 * lam * x - f3 * rho
        return (
            dx, dy, dp, dq,
            b1 * f1 + (p - q) * m1,
            b2 * f2 - p * m2,
            b3 * f3 + q * m3,
            p * dx + q * dy,
        )

    return rhs


def _ext_sir_demography(params, k):
    lam, g, mu = params["lambda"], params["gamma"], params["mu"]

    def rhs(t, u):
        x, y, p, q = u[0], u[1], u[2], u[3]
        b1, b2, b3, b4 = lam * x * y, (g + mu) * x, mu, mu * y
        e1, e2, e3, e4 = exp(p - q), exp(-p), exp(q), exp(-q)
        m1, m2, m3, m4 = b1 * e1, b2 * e2, b3 * e3, b4 * e4
        f1, f2, f3, f4 = 1.0 - e1, 1.0 - e2, 1.0 - e3, 1.0 - e4
        dx = m1 - m2
        dy = m3 + (-m1) - m4
        dp = f1 * lam * y + f2 * (g + mu)
        dq = f1 * lam * x + f4 * mu
        return (
            dx, dy, dp, dq,
            b1 * f1 + (p - q) * m1,
            b2 * f2 - p * m2,
            b3 * f3 + q * m3,
            b4 * f4 - q * m4,
            p * dx + q * dy,
        )

    return rhs


def _ext_siv(params, k):
    be, g = params["beta"], params["gamma"]
    eta, th = params["eta"], params["theta"]
    mu, chi = params["mu"], params["chi"]

    def rhs(t, u):
        x, y, p, q = u[0], u[1], u[2], u[3]
        s = 1.0 - x - y
        b1, b2, b3 = be * x * s, chi * be * x * y, g * x
        b4, b5, b6, b7 = th * y, eta * s, mu * x, mu * y
        ep, epq, emp, emq, eq_ = exp(p), exp(p - q), exp(-p), exp(-q), exp(q)
        m1, m2, m3 = b1 * ep, b2 * epq, b3 * emp
        m4, m5, m6, m7 = b4 * emq, b5 * eq_, b6 * emp, b7 * emq
        f1, f2, f3 = 1.0 - ep, 1.0 - epq, 1.0 - emp
        f4, f5, f6, f7 = 1.0 - emq, 1.0 - eq_, 1.0 - emp, 1.0 - emq
        dx = m1 + m2 - m3 - m6
        dy = m5 - m2 - m4 - m7
        dp = f1 * be * (s - x) + f2 * chi * be * y + f3 * g - f5 * eta + f6 * mu
        dq = -f1 * be * x + f2 * chi * be * x + f4 * th - f5 * eta + f7 * mu
        return (
            dx, dy, dp, dq,
            b1 * f1 + p * m1,
            b2 * f2 + (p - q) * m2,
            b3 * f3 - p * m3,
            b4 * f4 - q * m4,
            b5 * f5 + q * m5,
            b6 * f6 - p * m6,
            b7 * f7 - q * m7,
            p * dx + q * dy,
        )

    return rhs


def _ext_s0is1(params, k):
    be, al = params["beta"], params["alpha"]
    mu, rr = params["mu"], params["r"]

    def rhs(t, u):
        x, y, p, q = u[0], u[1], u[2], u[3]
        s = 1.0 - x - y
        b1, b2, b3 = be * x * s, al * x, mu * x
        b4, b5 = rr * be * x * y, mu * y
        ep, eqp, emp, epq, emq = exp(p), exp(q - p), exp(-p), exp(p - q), exp(-q)
        m1, m2, m3, m4, m5 = b1 * ep, b2 * eqp, b3 * emp, b4 * epq, b5 * emq
        f1, f2, f3 = 1.0 - ep, 1.0 - eqp, 1.0 - emp
        f4, f5 = 1.0 - epq, 1.0 - emq
        dx = m1 - m2 - m3 + m4
        dy = m2 - m4 - m5
        dp = f1 * be * (s - x) + f2 * al + f3 * mu + f4 * rr * be * y
        dq = -f1 * be * x + f4 * rr * be * x + f5 * mu
        return (
            dx, dy, dp, dq,
            b1 * f1 + p * m1,
            b2 * f2 + (q - p) * m2,
            b3 * f3 - p * m3,
            b4 * f4 + (p - q) * m4,
            b5 * f5 - q * m5,
            p * dx + q * dy,
        )

    return rhs


_EXTENDED_RHS = {
    "sirs": _ext_sirs,
    "sir_demography": _ext_sir_demography,
    "siv": _ext_siv,
    "s0is1": _ext_s0is1,
}


def extended_rhs(model: ModelSpec):
    """Extremal-system right-hand side with cost accumulators appended.

    The state vector is (x, y, p, q, c_1 .. c_k, a) where c_j integrates
    the per-reaction cost beta_j (1 - e^{w_j} + w_j e^{w_j}) with
    w_j = <r, h_j>, and a integrates <r, dz/dt>.  The two cost readings
    agree exactly when the reduced Hamiltonian vanishes, so their gap
    doubles as a conservation diagnostic.  Built-in models get a hand
    unrolled scalar closure (the shooting loop spends nearly all its
    time here); anything else falls back to the vectorized rate calls.
    """
    builder = _EXTENDED_RHS.get(model.name)
    if builder is not None:
        return builder(model.params, model.k)

    H = model.jumps.astype(float)
    rates_all, grads_all = model._rates_all, model._grads_all

    def rhs(t, u):
        z, r = u[0:2], u[2:4]
        beta = rates_all(z)
        w = H @ r
        ew = np.exp(w)
        mu = beta * ew
        dz = mu @ H
        dr = (1.0 - ew) @ grads_all(z)
        cj = beta * (1.0 - ew) + w * mu
        return np.concatenate([dz, dr, cj, [r @ dz]])

    return rhs


# ----------------------------------------------------------------------
# linearization at equilibria

def linearize_at_equilibrium(model: ModelSpec, equilibrium):
    """Jacobian of the extremal system at (equilibrium, r=0).

    Returns (J, spectrum, unstable_basis): the 2d x 2d Jacobian, its
    eigenvalues sorted by descending real part, and a real orthonormal
    basis of the unstable eigenspace (columns).  The analytic block form
    [[A, Q], [0, -A^T]] with A the drift Jacobian and
    Q = sum_j beta_j h_j h_j^T is cross-checked against a central
    finite difference of the vector field; eigenvalues must come in
    +/- pairs, which is asserted.

    Raises DegenerateSpectrum when some drift eigenvalue sits within
    1e-8 of the imaginary axis (the +/- mirror symmetry itself is
    structural and not flagged).
    """
    eq = np.asarray(equilibrium, dtype=float)
    d = model.d
    b = drift(model, eq)
    scale = float(np.max(np.abs(model._rates_all(eq)))) + 1.0
    if np.linalg.norm(b) > _EQUILIBRIUM_TOL * scale:
        raise ValueError(
            f"point {eq.tolist()} is not an equilibrium: |b| = "
            f"{np.linalg.norm(b):.3e}"
        )

    A = drift_jacobian(model, eq)
    beta = model._rates_all(eq)
    H = model.jumps.astype(float)
    Q = np.einsum("k,ka,kb->ab", beta, H, H)
    J = np.block([[A, Q], [np.zeros((d, d)), -A.T]])

    fd = _fd_jacobian(model, eq)
    gap = np.max(np.abs(J - fd))
    if gap > 1e-5 * (1.0 + np.max(np.abs(J))):
        raise ValueError(
            f"analytic and finite-difference Jacobians disagree by {gap:.3e}; "
            "the model's rate gradients are inconsistent with its rates"
        )

    eigvals, eigvecs = np.linalg.eig(J)
    lam_scale = max(1.0, float(np.max(np.abs(eigvals))))
    for lam in eigvals:
        if np.min(np.abs(eigvals + lam)) > 1e-8 * lam_scale:
            raise ValueError("spectrum is not symmetric under negation")
    a_eigs = np.linalg.eigvals(A)
    if np.min(np.abs(a_eigs.real)) <= 1e-8 * lam_scale:
        raise DegenerateSpectrum(
            f"drift eigenvalue too close to the imaginary axis: {a_eigs}"
        )

    order = np.argsort(-eigvals.real, kind="stable")
    spectrum = eigvals[order]
    basis = _real_eigenspace(eigvals, eigvecs, eigvals.real > 1e-8 * lam_scale)
    return J, spectrum, basis


def _fd_jacobian(model: ModelSpec, eq, h: float = 1e-6):
    def f(u):
        dz, dr = hamiltonian_rhs(model, HamiltonianPoint(u[:2], u[2:]))
        return np.concatenate([dz, dr])

    u0 = np.concatenate([eq, np.zeros(model.d)])
    cols = []
    for i in range(2 * model.d):
        e = np.zeros(2 * model.d)
        e[i] = h
        cols.append((f(u0 + e) - f(u0 - e)) / (2.0 * h))
    return np.stack(cols, axis=1)


def _real_eigenspace(eigvals, eigvecs, mask):
    """Real orthonormal basis of the invariant subspace selected by mask.

    Complex conjugate pairs contribute their real and imaginary parts
    once; columns come out orthonormal via QR.
    """
    cols = []
    used = np.zeros(len(eigvals), dtype=bool)
    for i in np.flatnonzero(mask):
        if used[i]:
            continue
        used[i] = True
        v = eigvecs[:, i]
        if abs(eigvals[i].imag) > 1e-12 * max(1.0, abs(eigvals[i])):
            partner = np.flatnonzero(
                mask & ~used & (np.abs(eigvals - eigvals[i].conj()) < 1e-8)
            )
            if partner.size:
                used[partner[0]] = True
            cols.extend([v.real, v.imag])
        else:
            cols.append(v.real)
    if not cols:
        return np.zeros((len(eigvals), 0))
    raw = np.stack(cols, axis=1)
    q, _ = np.linalg.qr(raw)
    return q


def _graph_matrix(basis4):
    """Matrix W with r = W dz on the invariant subspace spanned by basis4.

    basis4 stacks (dz, dr) components as rows 0:2 and 2:4.  Returns
    (W_symmetrized, asymmetry); the subspace is Lagrangian so genuine
    asymmetry indicates an ill-conditioned z projection, in which case
    (None, inf) comes back and tail bounds are skipped.
    """
    Vz, Vr = basis4[:2, :], basis4[2:, :]
    if Vz.shape[1] != 2 or np.linalg.cond(Vz) > 1e10:
        return None, math.inf
    W = Vr @ np.linalg.inv(Vz)
    asym = float(np.max(np.abs(W - W.T)))
    return 0.5 * (W + W.T), asym


# ----------------------------------------------------------------------
# results

@dataclass(frozen=True)
class QuasipotentialResult:
    """Outcome of one quasipotential solve.

    value is the nonnegative connection cost; path carries the states,
    the adjoints, and the optimal jump intensities as controls (per
    node for shooting, per cell for the discrete minimizer);
    endpoint_residual is |z_end - target| + |r_end|; hamiltonian_drift
    is max |H| along the path (zero for exact extremals);
    cost_breakdown splits value by reaction.  diagnostics carries
    method-specific extras such as the truncated tail bounds, which are
    reported there rather than folded into value.
    """

    value: float
    path: SmoothPath
    endpoint_residual: float
    hamiltonian_drift: float
    method: str  # "shooting" | "discrete_minimizer"
    cost_breakdown: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("quasipotential value must be nonnegative")
        if self.method not in ("shooting", "discrete_minimizer"):
            raise ValueError(f"unknown method {self.method!r}")

    def as_dict(self) -> dict:
        def clean(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, (np.floating, np.integer)):
                return float(x)
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            return x

        return {
            "value": float(self.value),
            "method": self.method,
            "endpoint_residual": float(self.endpoint_residual),
            "hamiltonian_drift": float(self.hamiltonian_drift),
            "cost_breakdown": [float(c) for c in self.cost_breakdown],
            "path": {
                "grid": self.path.grid.tolist(),
                "points": self.path.points.tolist(),
                "controls": clean(self.path.controls),
                "adjoints": clean(self.path.adjoints),
            },
            "diagnostics": clean(self.diagnostics),
        }


def _domain_clip(model: ModelSpec, pts):
    """Project points onto the domain closure (roundoff guard only)."""
    out = np.array(pts, dtype=float)
    np.clip(out, 0.0, None, out=out)
    cap = model.domain.cap
    if model.domain.kind == "simplex":
        s = out.sum(axis=-1)
        over = s > cap
        if np.any(over):
            out[over] -= ((s[over] - cap) / 2.0)[..., None]
            np.clip(out, 0.0, None, out=out)
    else:
        np.clip(out, None, cap, out=out)
    return out


# ----------------------------------------------------------------------
# shooting

def shoot_heteroclinic(model: ModelSpec, target=None, *,
                       epsilon: float = DEFAULT_EPSILON,
                       n_seeds: int = DEFAULT_SEEDS,
                       residual_tol: float = DEFAULT_RESIDUAL_TOL,
                       r_cap: float = DEFAULT_R_CAP,
                       t_cap: float = DEFAULT_T_CAP,
                       scan_rtol: float = 1e-8,
                       rtol: float = 1e-10,
                       atol: float = 1e-12,
                       refine_iters: int = 56) -> QuasipotentialResult:
    """Heteroclinic connection from (z*, 0) to (target, 0) by shooting.

    Seeds sit on a circle of radius epsilon in the two-dimensional
    unstable eigenspace at (z*, 0), parametrized by an angle alpha.
    Each seed is integrated (with per-reaction cost accumulators riding
    along) until the orbit escapes a bounding box or an adjoint cap;
    its figure of merit is the closest approach to a terminal state.  A
    coarse scan over n_seeds angles brackets the best seed, a sign
    bisection on the escape-side coefficient (with golden section and a
    quadratic fit as fallback) refines the angle, and the accepted
    orbit is re-integrated at tight tolerance and truncated at closest
    approach.

    When the target sits on a face where the transverse rates vanish,
    no interior orbit can reach (target, 0) directly: the stable
    directions there are confined to the face.  The connection then
    factors through a fixed point (target, r') with a nonzero adjoint,
    and continues along the zero-cost fiber orbit that carries r' to 0
    while z stays pinned.  Both legs are genuine orbits of the extremal
    flow; the splice gap at (target, r') is reported in diagnostics
    under chain_gap.

    The truncated quadratic tail costs at both equilibria are reported
    in diagnostics (keys tail_start and tail_end), not added to value.
    Raises NoConnection with the full (alpha, residual) landscape when
    no terminal state is reached within tolerance.
    """
    z_star = np.asarray(model.endemic, dtype=float)
    if target is None:
        target = model.boundary_attractor
    target = np.asarray(target, dtype=float)
    k = model.k

    if np.linalg.norm(target - z_star) <= 1e-9 * (1.0 + np.linalg.norm(z_star)):
        empty = np.zeros((0, model.d))
        return QuasipotentialResult(
            value=0.0,
            path=SmoothPath(np.zeros(0), empty, np.zeros((0, k)), empty),
            endpoint_residual=0.0,
            hamiltonian_drift=0.0,
            method="shooting",
            cost_breakdown=np.zeros(k),
            diagnostics={"trivial": True},
        )

    _, _, basis_u = linearize_at_equilibrium(model, z_star)
    if basis_u.shape[1] != 2:
        raise NoConnection(
            f"unstable eigenspace at the start has dimension "
            f"{basis_u.shape[1]}, expected 2"
        )
    W_start, asym_start = _graph_matrix(basis_u)

    J_t, _, _ = linearize_at_equilibrium(model, target)
    vals_t, vecs_t = np.linalg.eig(J_t)
    scale_t = max(1.0, float(np.max(np.abs(vals_t))))
    basis_s = _real_eigenspace(vals_t, vecs_t, vals_t.real < -1e-8 * scale_t)
    W_end, asym_end = _graph_matrix(basis_s)

    fun = extended_rhs(model)
    events = _escape_events(model, r_cap)
    u_base = np.concatenate([z_star, np.zeros(2 + k + 1)])
    chain_tol = min(1e-5, residual_tol)

    # Candidate terminal states on the adjoint fiber over the target.
    # Index 0 is the direct state (target, 0); any further entries are
    # fixed points with nonzero adjoint found on the same fiber.
    states = [np.concatenate([target, np.zeros(2)])]
    lefts = [_dominant_left(J_t)]
    for r_root in _fiber_fixed_points(model, target, r_cap):
        st = np.concatenate([target, r_root])
        states.append(st)
        lefts.append(_dominant_left(_fd_state_jacobian(fun, st, k)))
    order = list(range(len(states)))
    if len(states) > 1 and _confined_target(model, target, basis_s):
        order = order[1:] + order[:1]

    n_solves = [0]
    landscape = []

    def seed(alpha):
        u0 = u_base.copy()
        u0[:4] += epsilon * (
            math.cos(alpha) * basis_u[:, 0] + math.sin(alpha) * basis_u[:, 1]
        )
        return u0

    def solve(alpha, tight=False):
        n_solves[0] += 1
        sol = solve_ivp(
            fun, (0.0, t_cap), seed(alpha), method="RK45",
            rtol=(rtol if tight else scan_rtol),
            atol=(atol if tight else 1e-10),
            events=events, dense_output=True,
        )
        mets = _state_metrics(sol, states, lefts)
        landscape.append((float(alpha), float(mets[0][0])))
        return sol, mets

    step = 2.0 * math.pi / n_seeds
    alphas = np.linspace(0.0, 2.0 * math.pi, n_seeds, endpoint=False)
    scan = [solve(a) for a in alphas]

    init_cache = []

    def seed_init():
        if not init_cache:
            init_cache.append(_minimizer_init(model, z_star, target))
        return init_cache[0]

    for ci in order:
        accept = residual_tol if ci == 0 else chain_tol
        d_arr = np.array([s[1][ci][0] for s in scan])
        c_arr = np.array([s[1][ci][1] for s in scan])
        best_alpha = _refine_angle(
            ci, alphas, d_arr, c_arr, step, solve, accept, refine_iters)
        sol, mets = solve(best_alpha, tight=True)
        d_fin, _, t_close = mets[ci]
        if ci == 0:
            if d_fin <= residual_tol:
                return _assemble_shot(
                    model, sol, t_close, d_fin, best_alpha, epsilon, target,
                    W_start, W_end, asym_start, asym_end, n_solves[0])
            init = seed_init()
            if init is not None:
                bv = _bvp_polish(model, z_star, target, basis_u, basis_s,
                                 residual_tol, t_cap, init)
                if bv is not None:
                    ts_b, U_b = bv
                    out = _assemble_bvp(
                        model, ts_b, U_b, target, epsilon, basis_u,
                        W_start, W_end, asym_start, asym_end, n_solves[0])
                    if out.endpoint_residual <= residual_tol:
                        return out
            continue
        if d_fin > chain_tol:
            init = seed_init()
            if init is not None:
                ch = _chain_bvp(model, z_star, target, basis_u,
                                states[ci][2:4], residual_tol, t_cap,
                                fun, events, rtol, atol, init)
                if ch is not None:
                    ts_c, U_c, chain_diag = ch
                    out = _assemble_bvp(
                        model, ts_c, U_c, target, epsilon, basis_u,
                        W_start, W_end, asym_start, asym_end, n_solves[0],
                        extra=chain_diag)
                    if out.endpoint_residual <= residual_tol:
                        return out
            continue
        leg = _fiber_leg(model, fun, target, states[ci][2:4], events,
                         min(1e-6, 0.5 * residual_tol), d_fin,
                         0.4 * residual_tol, t_cap, rtol, atol)
        if leg is None:
            continue
        return _assemble_shot(
            model, sol, t_close, d_fin, best_alpha, epsilon, target,
            W_start, W_end, asym_start, asym_end, n_solves[0],
            fiber=(leg, states[ci][2:4], d_fin))

    best = min(landscape, key=lambda ab: ab[1])
    raise NoConnection(
        f"no heteroclinic connection within residual {residual_tol:g} "
        f"(best {best[1]:.3e} at alpha {best[0]:.6f})",
        landscape=sorted(landscape),
    )


def _refine_angle(ci, alphas, d_arr, c_arr, step, solve, accept, refine_iters):
    """Refine the seed angle against terminal-state candidate ci.

    Distance to the candidate as a function of alpha is a needle notch
    cut into a smooth basin (the notch width shrinks with the
    variational growth along the excursion), so a sign bisection on the
    escape-side coefficient is the robust refinement; the golden/zoom
    path below covers the no-sign-flip case, and a quadratic fit
    through squared distances polishes whichever route ran.

    The needle's location shifts by more than its own width when the
    integrator tolerance changes, so every coarse stage is re-anchored
    by a grid and bisection at the tight tolerance; the returned angle
    always comes from a tight probe when one exists.
    """
    n = len(alphas)
    recs = list(zip(alphas.tolist(), d_arr.tolist()))
    best_scan = [float(np.min(d_arr)), float(alphas[int(np.argmin(d_arr))])]
    best_tight = [math.inf, best_scan[1]]

    def probe(alpha, tight=False):
        _, mets = solve(alpha, tight)
        d, c, _ = mets[ci]
        recs.append((alpha, d))
        slot = best_tight if tight else best_scan
        if d < slot[0]:
            slot[0], slot[1] = d, alpha
        return d, c

    def bisect(lo, hi, c_lo, tight, width_stop, iters):
        for _ in range(iters):
            if hi - lo < width_stop:
                break
            mid = 0.5 * (lo + hi)
            d, c_mid = probe(mid, tight)
            if tight and d < 1e-11:
                break
            if c_mid * c_lo > 0:
                lo, c_lo = mid, c_mid
            else:
                hi = mid
        return lo, hi

    def tight_anchor(lo, hi):
        pad = 40.0 * (hi - lo) + 1e-7
        gs = np.linspace(lo - pad, hi + pad, 33)
        out = [probe(a, tight=True) for a in gs]
        cs = [o[1] for o in out]
        ds = [o[0] for o in out]
        pairs = [j for j in range(32) if cs[j] * cs[j + 1] < 0]
        if pairs:
            j = min(pairs, key=lambda q: min(ds[q], ds[q + 1]))
            bisect(float(gs[j]), float(gs[j + 1]), cs[j], True, 1e-15, 60)

    flips = [i for i in range(n)
             if c_arr[i] * c_arr[(i + 1) % n] < 0]
    if flips:
        i = min(flips, key=lambda j: min(d_arr[j], d_arr[(j + 1) % n]))
        lo = float(alphas[i])
        lo, hi = bisect(lo, lo + step, c_arr[i], False, 1e-7, 40)
        tight_anchor(lo, hi)
    if not flips or min(best_tight[0], best_scan[0]) > 0.5 * accept:
        lo = best_scan[1] - step
        hi = best_scan[1] + step
        for _ in range(14):
            grid = np.linspace(lo, hi, 17)
            ds = [probe(a)[0] for a in grid]
            j = int(np.argmin(ds))
            lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, 16)]
            if best_scan[0] < 1e-8:
                break
        inv = (math.sqrt(5.0) - 1.0) / 2.0
        x1, x2 = hi - inv * (hi - lo), lo + inv * (hi - lo)
        f1, f2 = probe(x1)[0], probe(x2)[0]
        for _ in range(refine_iters):
            if f1 <= f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - inv * (hi - lo)
                f1 = probe(x1)[0]
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + inv * (hi - lo)
                f2 = probe(x2)[0]
            if min(f1, f2) < 1e-9:
                break
        tight_anchor(lo, hi)

    tri = sorted(recs, key=lambda ab: ab[1])[:3]
    vertex = _parabola_vertex([t[0] for t in tri], [t[1] ** 2 for t in tri])
    if vertex is not None and abs(vertex - best_scan[1]) < step:
        probe(vertex, tight=True)
    return best_tight[1] if math.isfinite(best_tight[0]) else best_scan[1]


def _escape_events(model: ModelSpec, r_cap: float):
    cap = model.domain.cap
    margin = 0.25 * max(1.0, cap)
    simplex = model.domain.kind == "simplex"

    def ev_box(t, u):
        if simplex:
            return min(u[0] + margin, u[1] + margin, cap + margin - u[0] - u[1])
        return min(u[0] + margin, u[1] + margin,
                   cap + margin - u[0], cap + margin - u[1])

    def ev_adjoint(t, u):
        return r_cap * r_cap - (u[2] * u[2] + u[3] * u[3])

    ev_box.terminal = True
    ev_box.direction = -1
    ev_adjoint.terminal = True
    ev_adjoint.direction = -1
    return (ev_box, ev_adjoint)


def _state_metrics(sol, states, lefts):
    """Closest approach of the orbit to each 4-dim terminal state.

    For each candidate state returns (distance, coefficient, t); the
    distance is |dz| + |dr| at the minimizer of the combined squared
    distance (grid scan plus bounded polish), and the coefficient is
    the candidate's dominant left eigenvector applied to the offset,
    whose sign tells which side of the connection the orbit escapes on.
    """
    t_end = sol.t[-1]
    n = int(min(6000, max(400, 40.0 * t_end)))
    tg = np.linspace(0.0, t_end, n)
    U = sol.sol(tg)[:4]
    out = []
    for st, left in zip(states, lefts):
        d2 = np.sum((U - st[:, None]) ** 2, axis=0)
        i = int(np.argmin(d2))
        lo, hi = tg[max(i - 1, 0)], tg[min(i + 1, n - 1)]

        def f(t):
            du = sol.sol(t)[:4] - st
            return float(du @ du)

        if hi > lo:
            opt = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10 * max(1.0, t_end)})
            t_close = float(opt.x)
        else:
            t_close = float(tg[i])
        du = sol.sol(t_close)[:4] - st
        dist = float(np.hypot(du[0], du[1]) + np.hypot(du[2], du[3]))
        coef = float(left @ du) if left is not None else 0.0
        out.append((dist, coef, t_close))
    return out


def _dominant_left(J4):
    """Left eigenvector of the most unstable direction of a 4x4 Jacobian.

    Computed from the transpose so it survives defective Jordan blocks;
    returns None when the eigenresidual is too large to trust a sign.
    """
    vals, vecs = np.linalg.eig(J4.T)
    i = int(np.argmax(vals.real))
    left = np.real(vecs[:, i])
    nrm = np.linalg.norm(left)
    if nrm < 1e-12:
        return None
    left = left / nrm
    scale = max(1.0, float(np.max(np.abs(vals))))
    if np.linalg.norm(J4.T @ left - vals[i].real * left) > 1e-6 * scale:
        return None
    return left


def _fd_state_jacobian(fun, u4, k, h=1e-6):
    """Central-difference Jacobian of the (z, r) field at a 4-dim state."""
    def f(u):
        du = fun(0.0, np.concatenate([u, np.zeros(k + 1)]))
        return np.asarray(du[:4], dtype=float)

    cols = []
    for e in np.eye(4):
        cols.append((f(u4 + h * e) - f(u4 - h * e)) / (2.0 * h))
    return np.stack(cols, axis=1)


def _fiber_fixed_points(model: ModelSpec, base, r_cap):
    """Nonzero adjoint roots of the extremal flow on the fiber over base.

    Solves sum_j (1 - exp(<r, h_j>)) grad beta_j(base) = 0 by damped
    Newton from a ring of starts; the zero root is discarded.  At a
    boundary attractor with vanishing transverse rates these roots are
    the way stations of the exit path.
    """
    H = model.jumps.astype(float)
    G = np.asarray(model._grads_all(np.asarray(base, dtype=float)),
                   dtype=float)
    if not np.any(np.abs(G) > 1e-14):
        return []

    def F(r):
        return (1.0 - np.exp(H @ r)) @ G

    def JF(r):
        ew = np.exp(H @ r)
        return -(G * ew[:, None]).T @ H

    starts = [np.array([0.0, 0.0])]
    for rad in (0.3, 0.7, 1.5, 3.0):
        for ang in np.linspace(0.0, 2.0 * math.pi, 8, endpoint=False):
            starts.append(rad * np.array([math.cos(ang), math.sin(ang)]))
    roots = []
    for r0 in starts:
        r = r0.copy()
        for _ in range(60):
            fr = F(r)
            if not np.all(np.isfinite(fr)):
                break
            try:
                dr = np.linalg.solve(JF(r), -fr)
            except np.linalg.LinAlgError:
                break
            ndr = np.linalg.norm(dr)
            if ndr > 2.0:
                dr *= 2.0 / ndr
            r = r + dr
            if np.max(np.abs(r)) > 0.5 * r_cap:
                break
            if ndr < 1e-13:
                break
        else:
            continue
        if (np.max(np.abs(r)) <= 0.5 * r_cap
                and np.linalg.norm(F(r)) < 1e-11
                and np.linalg.norm(r) > 1e-6
                and not any(np.linalg.norm(r - q) < 1e-7 for q in roots)):
            roots.append(r)
    roots.sort(key=np.linalg.norm)
    return roots


def _confined_target(model: ModelSpec, target, basis_s):
    """True when no interior orbit can converge to (target, 0).

    That happens for a target on a domain face whose stable directions
    all lie inside the face: the face is invariant and the approach
    from the interior is cut off, so the connection must factor through
    a nonzero-adjoint fixed point on the fiber.
    """
    cap = model.domain.cap
    tol = 1e-9
    normals = []
    if target[0] < tol:
        normals.append(np.array([1.0, 0.0]))
    if target[1] < tol:
        normals.append(np.array([0.0, 1.0]))
    if model.domain.kind == "simplex":
        if target.sum() > cap - tol:
            normals.append(np.array([1.0, 1.0]) / math.sqrt(2.0))
    else:
        if target[0] > cap - tol:
            normals.append(np.array([1.0, 0.0]))
        if target[1] > cap - tol:
            normals.append(np.array([0.0, 1.0]))
    if not normals or basis_s.size == 0:
        return False
    for nrm in normals:
        if np.max(np.abs(nrm @ basis_s[:2, :])) < 1e-8:
            return True
    return False


def _fiber_leg(model: ModelSpec, fun, target, r_dag, events, floor, gap,
               z_tol, t_cap, rtol, atol):
    """Orbit that carries the adjoint from r_dag down to (nearly) zero.

    Starts a hair off the fixed point (target, r_dag) along each
    unstable direction whose adjoint part points back toward r = 0, and
    keeps the first orbit whose adjoint norm dips below floor while z
    stays within z_tol of the target.  Returns (sol, t_done) or None.
    """
    k = model.k
    st = np.concatenate([target, r_dag])
    J4 = _fd_state_jacobian(fun, st, k)
    vals, vecs = np.linalg.eig(J4)
    scale = max(1.0, float(np.max(np.abs(vals))))
    basis = _real_eigenspace(vals, vecs, vals.real > 1e-8 * scale)
    if basis.size == 0:
        return None

    def ev_done(t, u):
        return u[2] * u[2] + u[3] * u[3] - floor * floor

    ev_done.terminal = True
    ev_done.direction = -1
    delta = max(1e-8, min(1e-6, gap))

    cands = []
    for j in range(basis.shape[1]):
        for sgn in (1.0, -1.0):
            d = sgn * basis[:, j]
            if np.hypot(d[2], d[3]) < 1e-8:
                continue
            cands.append(d)
    cands.sort(key=lambda d: float(r_dag @ d[2:4]))
    for d in cands:
        u0 = np.concatenate([st + delta * d, np.zeros(k + 1)])
        u0[:2] = _domain_clip(model, u0[:2])
        sol = solve_ivp(fun, (0.0, t_cap), u0, method="RK45",
                        rtol=rtol, atol=atol,
                        events=(*events, ev_done), dense_output=True)
        tev = sol.t_events[-1]
        if tev.size == 0:
            continue
        t_done = float(tev[0])
        u_end = sol.sol(t_done)
        if np.hypot(u_end[0] - target[0], u_end[1] - target[1]) <= z_tol:
            return sol, t_done
    return None


def _field4(model: ModelSpec):
    """Batched extremal vector field on columns of a (4, m) array."""
    H = model.jumps.astype(float)

    def F(U):
        Z = _domain_clip(model, U[:2].T)
        R = U[2:4].T
        beta = model._rates_all(Z)
        grads = model._grads_all(Z)
        ew = np.exp(np.clip(R @ H.T, -60.0, 60.0))
        dz = (beta * ew) @ H
        dr = np.einsum("mk,mkd->md", 1.0 - ew, grads)
        return np.vstack([dz.T, dr.T])

    return F


def _orth_complement(basis4):
    """Orthonormal complement of a (4, j) orthonormal basis in R^4."""
    q, _ = np.linalg.qr(np.hstack([basis4, np.eye(4)]))
    return q[:, basis4.shape[1]:4]


def _bvp_polish(model: ModelSpec, z_star, target, basis_u, basis_s,
                residual_tol, t_cap, init):
    """Collocation solve of the connection as a projection BVP.

    When the unstable spectrum at the start splits into fast and slow
    rates, the angle window in which a shot tracks the connection
    shrinks like exp(-fast * T), below machine resolution in alpha, and
    no one-dimensional refinement can land the orbit.  The remedy is to
    solve for the whole orbit at once: collocation on normalized time
    with the duration as a free parameter, the start offset confined to
    the unstable eigenplane, and the end offset confined to the stable
    eigenplane and pinned to a small norm.  The norm must stay small
    because the projection conditions only hold up to the quadratic bend
    of the manifolds away from their tangent planes.

    Two passes.  The first pins the start to a small circle inside the
    unstable eigenplane, with the circle angle as a second free
    parameter, and leaves the end norm free.  Pinning the full start
    state matters: with only plane projections there, the eigenplane is
    an affine slice of the full space that can intersect invariant faces
    of the domain far from the equilibrium, and a solver happily
    converges onto a zero-cost orbit inside such a face.  The free end
    norm settles at the scale where manifold curvature balances the
    transverse contamination of the orbit, typically well above the
    endpoint tolerance, so a second pass re-solves with the end norm
    pinned small and the start relaxed to plane projections; seeded from
    the first orbit, it has no room left to wander off the branch, and
    an upper bound on the start offset guards the switch (the start may
    legitimately slide closer to the equilibrium as the duration grows).

    The solver's uniform residual criterion is not the acceptance test
    here: the orbit dwells for hundreds of time units in the slow tail,
    where mesh refinement saturates the node budget long after the
    solution itself has converged.  A solution is kept whenever the
    boundary conditions are met to near machine precision; the caller
    gates on the endpoint residual and the assembled result carries the
    Hamiltonian drift for the downstream invariant checks.  Returns
    (time grid, states) or None.
    """
    u_star = np.concatenate([z_star, np.zeros(2)])
    u_bar = np.concatenate([target, np.zeros(2)])
    end_norm = 0.3 * residual_tol
    xs, u0, t0 = init
    return _two_pass_bvp(model, u_star, u_bar, basis_u, basis_s, end_norm,
                         xs, u0, t0)


def _two_pass_bvp(model, u_star, u_bar, basis_u, basis_s_end, end_norm,
                  xs, u0, t0):
    """Shared two-pass projection collocation between two 4-dim states."""
    U_perp = _orth_complement(basis_u)
    S_perp = _orth_complement(basis_s_end)
    eps0 = 1e-3
    F = _field4(model)

    def rhs(x, u, p):
        return p[0] * F(u)

    def bc_start_pinned(ua, ub, p):
        d0 = ua - u_star - eps0 * (
            math.cos(p[1]) * basis_u[:, 0] + math.sin(p[1]) * basis_u[:, 1])
        dT = ub - u_bar
        return np.array([
            d0[0], d0[1], d0[2], d0[3],
            S_perp[:, 0] @ dT,
            S_perp[:, 1] @ dT,
        ])

    def bc_end_pinned(ua, ub, p):
        d0 = ua - u_star
        dT = ub - u_bar
        return np.array([
            U_perp[:, 0] @ d0,
            U_perp[:, 1] @ d0,
            S_perp[:, 0] @ dT,
            S_perp[:, 1] @ dT,
            dT @ dT - end_norm * end_norm,
        ])

    def attempt(bc, grid, uinit, params):
        try:
            sol = solve_bvp(rhs, bc, grid, uinit, p=params, tol=1e-8,
                            max_nodes=60000, verbose=0)
        except (ValueError, np.linalg.LinAlgError):
            return None
        if sol.status not in (0, 1) or not np.all(np.isfinite(sol.y)):
            return None
        if not 0.0 < float(sol.p[0]):
            return None
        if float(np.max(np.abs(bc(sol.y[:, 0], sol.y[:, -1], sol.p)))) > 1e-7:
            return None
        return sol

    alpha0 = 0.0
    for j in range(u0.shape[1]):
        delta = u0[:, j] - u_star
        if np.linalg.norm(delta) >= 10.0 * eps0:
            alpha0 = math.atan2(basis_u[:, 1] @ delta, basis_u[:, 0] @ delta)
            break
    first = attempt(bc_start_pinned, xs, u0, [t0, alpha0])
    if first is None:
        return None
    second = attempt(bc_end_pinned, first.x, first.y, [float(first.p[0])])
    sol = first
    if second is not None:
        off0 = float(np.linalg.norm(second.y[:, 0] - u_star))
        if off0 <= 10.0 * eps0:
            sol = second
    t_total = float(sol.p[0])
    return sol.x * t_total, sol.y[:4]


def _chain_bvp(model: ModelSpec, z_star, target, basis_u, r_dag,
               residual_tol, t_cap, fun, events, rtol, atol, init):
    """Collocation solve of the interior leg of a corner chain.

    At a way station whose slowest stable rate is far below its fastest
    unstable rate, the passage distance achievable by shooting scales
    like a small power of the seed precision and stalls orders of
    magnitude above tolerance.  Collocating the full connection in one
    piece fails as well: past the way station the transverse coordinate
    contracts and then re-expands while pressed exponentially against an
    invariant face, a corridor whose absolute scale the collocation
    cannot represent.  What is well conditioned is the interior leg on
    its own, ending on the stable eigenplane of the way station, so that
    is solved as a projection BVP; the zero-cost adjoint descent is then
    integrated as a separate orbit and the two samplings are stitched.
    Returns (time grid, states, diagnostics) or None.
    """
    k = model.k
    u_star = np.concatenate([z_star, np.zeros(2)])
    u_dag = np.concatenate([target, r_dag])
    J4 = _fd_state_jacobian(fun, u_dag, k)
    vals, vecs = np.linalg.eig(J4)
    scale = max(1.0, float(np.max(np.abs(vals))))
    basis_s_dag = _real_eigenspace(vals, vecs, vals.real < -1e-8 * scale)
    if basis_s_dag.shape[1] != 2:
        return None
    xs, u0, t0 = init
    d_dag = np.linalg.norm(u0 - u_dag[:, None], axis=0)
    j_star = int(np.argmin(d_dag))
    if j_star < 5:
        return None
    xs_t, u0_t = xs[: j_star + 1], u0[:, : j_star + 1]
    t_leg = t0 * float(xs_t[-1])
    if t_leg <= 0:
        return None
    xs_t = xs_t / xs_t[-1]
    if d_dag[j_star] > 1e-3:
        n_ramp = max(8, xs_t.size // 5)
        pad = np.linspace(0.0, 1.0, n_ramp + 1)[1:]
        ramp = u0_t[:, -1:] + (u_dag - u0_t[:, -1])[:, None] * pad
        stretch = 0.2
        xs_t = np.concatenate([xs_t, 1.0 + stretch * pad]) / (1.0 + stretch)
        u0_t = np.hstack([u0_t, ramp])
        t_leg *= 1.0 + stretch
    end_norm = min(1e-5, 0.3 * residual_tol)
    leg_a = _two_pass_bvp(model, u_star, u_dag, basis_u, basis_s_dag,
                          end_norm, xs_t, u0_t, t_leg)
    if leg_a is None:
        return None
    ts_a, U_a = leg_a
    gap = float(np.linalg.norm(U_a[:, -1] - u_dag))
    leg = _fiber_leg(model, fun, target, r_dag, events,
                     min(1e-6, 0.5 * residual_tol), gap,
                     0.4 * residual_tol, t_cap, rtol, atol)
    if leg is None:
        return None
    sol_b, t_done = leg
    n_b = int(min(600, max(60, 20.0 * t_done)))
    ts_b = np.linspace(0.0, t_done, n_b)
    U_b = sol_b.sol(ts_b)[:4]
    ts = np.concatenate([ts_a, ts_a[-1] + 1e-9 + ts_b])
    U = np.hstack([U_a, U_b])
    diag = {
        "mode": "chain-collocation",
        "chain_adjoint": (float(r_dag[0]), float(r_dag[1])),
        "chain_gap": gap,
        "fiber_time": float(t_done),
    }
    return ts, U, diag


def _minimizer_init(model: ModelSpec, z_star, target):
    """Initial BVP mesh from the discrete action minimizer's path.

    The minimizer carries per-cell adjoint estimates at cell midpoints;
    they are interpolated to the nodes to seed the collocation unknowns.
    """
    try:
        ref = minimize_discrete_action(model, z_star, target, M=48)
    except ExitlabError:
        return None
    path = ref.path
    ts = path.grid
    t_total = float(ts[-1])
    if t_total <= 0:
        return None
    mids = 0.5 * (ts[:-1] + ts[1:])
    rs = np.vstack([
        np.interp(ts, mids, path.adjoints[:, 0]),
        np.interp(ts, mids, path.adjoints[:, 1]),
    ])
    return ts / t_total, np.vstack([path.points.T, rs]), t_total


def _assemble_bvp(model, ts, U, target, epsilon, basis_u,
                  W_start, W_end, asym_start, asym_end, n_solves,
                  extra=None):
    """Result assembly from a collocation orbit given as sampled arrays."""
    k = model.k
    H = model.jumps.astype(float)
    points = U[:2].T.copy()
    adjoints = U[2:4].T.copy()
    pts_c = _domain_clip(model, points)
    beta = model._rates_all(pts_c)
    w = adjoints @ H.T
    ew = np.exp(np.clip(w, -60.0, 60.0))
    controls = np.maximum(beta * ew, 0.0)
    cj = beta * (1.0 - ew) + w * (beta * ew)
    breakdown = np.maximum(np.trapezoid(cj, ts, axis=0), 0.0)
    value = float(breakdown.sum())
    vel = controls @ H
    cost_rz = float(np.trapezoid(np.einsum("md,md->m", adjoints, vel), ts))
    hvals = np.sum(beta * (ew - 1.0), axis=-1)
    drift_max = float(np.max(np.abs(hvals)))
    res = float(np.hypot(points[-1, 0] - target[0], points[-1, 1] - target[1])
                + np.hypot(adjoints[-1, 0], adjoints[-1, 1]))

    gap = _adjoint_identity_gap(model, pts_c, adjoints, controls, H)
    if gap > 1e-6:
        raise NonConvergence(
            "adjoint does not match the Lagrangian dual variable along the "
            "accepted orbit",
            diagnostics={"max_gap": gap},
        )

    dz0 = points[0] - model.endemic
    tail_start = (0.5 * dz0 @ W_start @ dz0 if W_start is not None
                  else math.nan)
    dzT = points[-1] - target
    tail_end = (-0.5 * dzT @ W_end @ dzT if W_end is not None else math.nan)
    delta0 = np.concatenate([dz0, adjoints[0]])
    alpha0 = math.atan2(float(basis_u[:, 1] @ delta0),
                        float(basis_u[:, 0] @ delta0)) % (2.0 * math.pi)

    path = SmoothPath(ts, points, controls, adjoints)
    return QuasipotentialResult(
        value=value,
        path=path,
        endpoint_residual=res,
        hamiltonian_drift=drift_max,
        method="shooting",
        cost_breakdown=breakdown,
        diagnostics={
            "mode": "collocation",
            "alpha": float(alpha0),
            "epsilon": float(np.linalg.norm(delta0)),
            "t_close": float(ts[-1]),
            "n_solves": int(n_solves),
            "cost_rz": cost_rz,
            "hamiltonian_gap_integral": abs(value - cost_rz),
            "adjoint_dual_gap": float(gap),
            "tail_start": float(tail_start),
            "tail_end": float(tail_end),
            "tail_asymmetry": (float(asym_start), float(asym_end)),
            "max_rate_sum": float(np.max(beta.sum(-1))),
            **(extra or {}),
        },
    )


def _parabola_vertex(xs, ys):
    if len(set(xs)) < 3:
        return None
    mu = sum(xs) / len(xs)
    c = np.polyfit([x - mu for x in xs], ys, 2)
    if c[0] <= 0:
        return None
    return float(mu - c[1] / (2.0 * c[0]))


def _assemble_shot(model, sol, t_close, res, alpha, epsilon, target,
                   W_start, W_end, asym_start, asym_end, n_solves,
                   fiber=None):
    k = model.k
    H = model.jumps.astype(float)
    n_out = int(min(2000, max(200, 30.0 * t_close)))
    ts = np.linspace(0.0, t_close, n_out)
    U = sol.sol(ts)
    points = U[0:2].T.copy()
    adjoints = U[2:4].T.copy()

    u_end = sol.sol(t_close)
    breakdown = np.maximum(u_end[4:4 + k], 0.0)
    cost_rz = float(u_end[4 + k])

    chain_diag = {}
    if fiber is not None:
        (sol_b, t_done), r_dag, gap = fiber
        n_b = int(min(600, max(60, 20.0 * t_done)))
        ts_b = np.linspace(0.0, t_done, n_b)
        U_b = sol_b.sol(ts_b)
        ts = np.concatenate([ts, t_close + ts_b + 1e-9])
        points = np.vstack([points, U_b[0:2].T])
        adjoints = np.vstack([adjoints, U_b[2:4].T])
        u_b_end = sol_b.sol(t_done)
        breakdown = breakdown + np.maximum(u_b_end[4:4 + k], 0.0)
        cost_rz += float(u_b_end[4 + k])
        res = float(np.hypot(u_b_end[0] - target[0], u_b_end[1] - target[1])
                    + np.hypot(u_b_end[2], u_b_end[3]))
        chain_diag = {
            "mode": "chain",
            "chain_adjoint": tuple(float(v) for v in r_dag),
            "chain_gap": float(gap),
            "fiber_time": float(t_done),
        }
    value = float(breakdown.sum())

    pts_c = _domain_clip(model, points)
    beta = model._rates_all(pts_c)
    w = adjoints @ H.T
    controls = np.maximum(beta * np.exp(w), 0.0)
    hvals = np.sum(beta * (np.exp(w) - 1.0), axis=-1)
    drift_max = float(np.max(np.abs(hvals)))

    gap = _adjoint_identity_gap(model, pts_c, adjoints, controls, H)
    if gap > 1e-6:
        raise NonConvergence(
            "adjoint does not match the Lagrangian dual variable along the "
            "accepted orbit",
            diagnostics={"max_gap": gap, "alpha": alpha},
        )

    dz0 = points[0] - model.endemic
    tail_start = (0.5 * dz0 @ W_start @ dz0 if W_start is not None
                  else math.nan)
    dzT = points[-1] - target
    tail_end = (-0.5 * dzT @ W_end @ dzT if W_end is not None else math.nan)

    path = SmoothPath(ts, points, controls, adjoints)
    diagnostics = {
        "mode": "direct",
        "alpha": float(alpha),
        "epsilon": float(epsilon),
        "t_close": float(t_close),
        "n_solves": int(n_solves),
        "cost_rz": cost_rz,
        "hamiltonian_gap_integral": abs(value - cost_rz),
        "adjoint_dual_gap": float(gap),
        "tail_start": float(tail_start),
        "tail_end": float(tail_end),
        "tail_asymmetry": (float(asym_start), float(asym_end)),
        "max_rate_sum": float(np.max(model._rates_all(pts_c).sum(-1))),
    }
    diagnostics.update(chain_diag)
    return QuasipotentialResult(
        value=value,
        path=path,
        endpoint_residual=res,
        hamiltonian_drift=drift_max,
        method="shooting",
        cost_breakdown=breakdown,
        diagnostics=diagnostics,
    )


def _adjoint_identity_gap(model, points, adjoints, controls, H):
    """max |theta*(z, dz/dt) - r| over well-conditioned orbit nodes.

    Nodes where the dual Hessian (the control-weighted jump covariance)
    is nearly singular are skipped: as a rate subset vanishes near a
    boundary face the dual maximizer degenerates into a flat manifold,
    so the identity carries no numerical content there.
    """
    vel = controls @ H
    c_xx = controls @ (H[:, 0] * H[:, 0])
    c_xy = controls @ (H[:, 0] * H[:, 1])
    c_yy = controls @ (H[:, 1] * H[:, 1])
    half_tr = 0.5 * (c_xx + c_yy)
    det = c_xx * c_yy - c_xy * c_xy
    lam_min = half_tr - np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
    keep = ((np.linalg.norm(vel, axis=1) > 1e-10)
            & (lam_min > 1e-3 * (1.0 + 2.0 * half_tr)))
    idx = np.flatnonzero(keep)[::5]
    if idx.size == 0:
        return 0.0
    vals, thetas = lagrangian_many(model, points[idx], vel[idx])
    ok = np.isfinite(vals)
    if not ok.all():
        return math.inf
    return float(np.max(np.abs(thetas - adjoints[idx])))


# ----------------------------------------------------------------------
# discrete action minimizer

def minimize_discrete_action(model: ModelSpec, z_start, z_end,
                             M: int = 48, T_total=None, *,
                             grad_mode: str = "envelope",
                             gtol: float = 1e-9,
                             max_inner: int = 2400,
                             t_range=FREE_T_RANGE,
                             golden_iters: int = 34,
                             init_path=None,
                             penalty_weight: float = 1e5) -> QuasipotentialResult:
    """Minimize the discretized action over M free interior nodes.

    The path is a polyline with fixed endpoints; each cell contributes
    L(midpoint, chord velocity) * dt, which keeps every Lagrangian
    evaluation strictly inside the domain even when an endpoint sits on
    a face where rates vanish.  Interior nodes are box-bounded away
    from the faces by a 1e-7 margin and a quadratic hinge keeps simplex
    nodes under the cap, so the transform stays finite throughout.

    T_total fixes the duration; None searches it by golden section on
    t_range, warm starting each trial from the best path so far.
    grad_mode "envelope" uses the exact gradient of the optimal-value
    function (the dual maximizer absorbs the inner dependence);
    "fd" falls back to the optimizer's own finite differences.
    Raises NonConvergence when the final polish stops above gtol.
    """
    z0 = _require_in_domain(model, np.asarray(z_start, dtype=float))
    z1 = _require_in_domain(model, np.asarray(z_end, dtype=float))
    if M < 1:
        raise ValueError("need at least one interior node")
    if grad_mode not in ("envelope", "fd"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")

    nodes0 = _initial_nodes(model, z0, z1, M, init_path)
    cap = model.domain.cap
    lo, hi = _INTERIOR_MARGIN, cap - _INTERIOR_MARGIN
    bounds = [(lo, hi)] * (2 * M)

    state = {"x": nodes0[1:-1].ravel().copy(), "best": math.inf}

    def inner(T, polish=False):
        dt = T / (M + 1)
        fun = _DiscreteObjective(model, z0, z1, M, dt, penalty_weight)
        res = minimize(
            fun.value_and_grad if grad_mode == "envelope" else fun.value_only,
            state["x"],
            jac=(grad_mode == "envelope"),
            method="L-BFGS-B",
            bounds=bounds,
            options={
                "maxiter": max_inner if polish else max_inner // 2,
                "ftol": 1e-14,
                "gtol": gtol if polish else max(gtol, 1e-8),
                "maxls": 80,
            },
        )
        if res.fun < state["best"]:
            state["best"] = res.fun
            state["x"] = res.x.copy()
        return res

    if T_total is not None:
        T_star = float(T_total)
        res = inner(T_star, polish=True)
    else:
        t_lo, t_hi = t_range
        inv = (math.sqrt(5.0) - 1.0) / 2.0
        x1 = t_hi - inv * (t_hi - t_lo)
        x2 = t_lo + inv * (t_hi - t_lo)
        f1, f2 = inner(x1).fun, inner(x2).fun
        for _ in range(golden_iters):
            if f1 <= f2:
                t_hi, x2, f2 = x2, x1, f1
                x1 = t_hi - inv * (t_hi - t_lo)
                f1 = inner(x1).fun
            else:
                t_lo, x1, f1 = x1, x2, f2
                x2 = t_lo + inv * (t_hi - t_lo)
                f2 = inner(x2).fun
        T_star = x1 if f1 <= f2 else x2
        res = inner(T_star, polish=True)

    grad_norm = float(np.max(np.abs(res.jac))) if res.jac is not None else math.nan
    if not res.success and grad_norm > 1e-5:
        raise NonConvergence(
            f"discrete action minimizer stalled: {res.message}",
            diagnostics={"grad_norm": grad_norm, "T": T_star,
                         "value": float(res.fun)},
        )

    return _assemble_discrete(model, z0, z1, M, T_star, res.x,
                              penalty_weight, grad_norm)


class _DiscreteObjective:
    """Discrete action S(nodes; dt) with its envelope gradient.

    Midpoints are clipped into the domain closure before the Legendre
    transform purely as a roundoff guard; the node bounds and the cap
    hinge keep genuine iterates interior, so the clip is inactive at
    any optimum it reports.
    """

    def __init__(self, model, z0, z1, M, dt, penalty_weight):
        self.model = model
        self.z0, self.z1 = z0, z1
        self.M, self.dt = M, dt
        self.w_pen = penalty_weight
        self.cap = model.domain.cap
        self.simplex = model.domain.kind == "simplex"
        self.H = model.jumps.astype(float)

    def _nodes(self, x):
        nodes = np.empty((self.M + 2, 2))
        nodes[0] = self.z0
        nodes[-1] = self.z1
        nodes[1:-1] = x.reshape(self.M, 2)
        return nodes

    def _eval(self, x):
        nodes = self._nodes(x)
        mids = 0.5 * (nodes[:-1] + nodes[1:])
        vels = np.diff(nodes, axis=0) / self.dt
        mids_c = _domain_clip(self.model, mids)
        # line searches probe wild nodes; overflow there is answered by
        # the non-finite bailout below, not worth a warning
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                vals, thetas = lagrangian_many(self.model, mids_c, vels)
            except NonConvergence:
                return None, nodes, None, None, None
        if not np.all(np.isfinite(vals)):
            return None, nodes, None, None, None
        return vals, nodes, mids_c, vels, thetas

    def _penalty(self, nodes):
        if not self.simplex:
            return 0.0, np.zeros((self.M, 2))
        s = nodes[1:-1].sum(axis=1) - (self.cap - _INTERIOR_MARGIN)
        viol = np.maximum(s, 0.0)
        grad = (2.0 * self.w_pen * viol)[:, None] * np.ones((1, 2))
        return float(self.w_pen * np.sum(viol ** 2)), grad

    def value_and_grad(self, x):
        vals, nodes, mids, vels, thetas = self._eval(x)
        if vals is None:
            return 1e8 + float(np.sum(x ** 2)), np.zeros_like(x)
        pen, pen_grad = self._penalty(nodes)
        S = float(vals.sum() * self.dt + pen)

        ew = np.exp(thetas @ self.H.T)
        grads = self.model._grads_all(mids)
        gz = -np.einsum("ck,cka->ca", ew - 1.0, grads)
        g_nodes = np.zeros_like(nodes)
        g_nodes[:-1] += 0.5 * self.dt * gz - thetas
        g_nodes[1:] += 0.5 * self.dt * gz + thetas
        g = g_nodes[1:-1] + pen_grad
        return S, g.ravel()

    def value_only(self, x):
        vals, nodes, _, _, _ = self._eval(x)
        if vals is None:
            return 1e8 + float(np.sum(x ** 2))
        pen, _ = self._penalty(nodes)
        return float(vals.sum() * self.dt + pen)


def _initial_nodes(model, z0, z1, M, init_path):
    if init_path is not None:
        pts = init_path.points if isinstance(init_path, SmoothPath) else np.asarray(init_path, float)
        if len(pts) != M + 2:
            u_old = np.linspace(0.0, 1.0, len(pts))
            u_new = np.linspace(0.0, 1.0, M + 2)
            pts = np.stack(
                [np.interp(u_new, u_old, pts[:, 0]),
                 np.interp(u_new, u_old, pts[:, 1])], axis=1)
        nodes = pts.copy()
    else:
        u = np.linspace(0.0, 1.0, M + 2)[:, None]
        nodes = (1.0 - u) * z0 + u * z1
    nodes[1:-1] = _nudge_interior(model, nodes[1:-1], 1e-3)
    nodes[0], nodes[-1] = z0, z1
    return nodes


def _nudge_interior(model, pts, h):
    """Push nodes at least h inside every face (chords may graze faces)."""
    out = np.maximum(np.asarray(pts, float), h)
    cap = model.domain.cap
    if model.domain.kind == "simplex":
        for _ in range(2):
            over = out.sum(axis=1) - (cap - h)
            mask = over > 0
            out[mask] -= (over[mask] / 2.0)[:, None]
            out = np.maximum(out, h)
    else:
        out = np.minimum(out, cap - h)
    return out


def _assemble_discrete(model, z0, z1, M, T, x, penalty_weight, grad_norm):
    k = model.k
    dt = T / (M + 1)
    obj = _DiscreteObjective(model, z0, z1, M, dt, penalty_weight)
    vals, nodes, mids, vels, thetas = obj._eval(x)
    if vals is None:
        raise NonConvergence("discrete minimizer returned an infeasible path")
    pen, _ = obj._penalty(nodes)
    value = float(vals.sum() * dt)

    H = model.jumps.astype(float)
    beta = model._rates_all(mids)
    mu = beta * np.exp(thetas @ H.T)
    fvals = relative_entropy_f(mu, beta)
    breakdown = fvals.sum(axis=0) * dt
    hvals = np.sum(beta * (np.exp(thetas @ H.T) - 1.0), axis=-1)

    grid = np.linspace(0.0, T, M + 2)
    path = SmoothPath(grid, nodes, np.maximum(mu, 0.0), thetas)
    return QuasipotentialResult(
        value=value,
        path=path,
        endpoint_residual=0.0,
        hamiltonian_drift=float(np.max(np.abs(hvals))),
        method="discrete_minimizer",
        cost_breakdown=breakdown,
        diagnostics={
            "T": float(T),
            "M": int(M),
            "penalty": pen,
            "grad_norm": grad_norm,
            "duality_gap": float(np.max(np.abs(fvals.sum(axis=1) - vals))),
        },
    )


# ----------------------------------------------------------------------
# boundary profile

@dataclass(frozen=True)
class ProfileTable:
    """Quasipotential profile along a boundary trace.

    One row per profiled trace vertex: arclength s, the point y, the
    cost V(z*, y), and the excess S(y) = V - min V.  Failed points stay
    in the table with V = nan and their indices listed in gaps.
    """

    s: np.ndarray
    points: np.ndarray
    value: np.ndarray
    excess: np.ndarray
    argmin_index: int
    attractor_distance: float
    gaps: tuple
    grid_spacing: float
    trace_tolerance: float

    @property
    def argmin_point(self) -> np.ndarray:
        return self.points[self.argmin_index]

    def to_csv(self, fp) -> None:
        close = False
        if isinstance(fp, (str, bytes, os.PathLike)):
            fp = open(fp, "w", encoding="utf-8")
            close = True
        try:
            fp.write("s,y_x,y_y,V,S\n")
            for i in range(len(self.s)):
                fp.write("%.12g,%.12g,%.12g,%.12g,%.12g\n" % (
                    self.s[i], self.points[i, 0], self.points[i, 1],
                    self.value[i], self.excess[i]))
        finally:
            if close:
                fp.close()

    def as_dict(self) -> dict:
        return {
            "s": self.s.tolist(),
            "points": self.points.tolist(),
            "V": self.value.tolist(),
            "S": self.excess.tolist(),
            "argmin_index": int(self.argmin_index),
            "attractor_distance": float(self.attractor_distance),
            "gaps": list(self.gaps),
            "grid_spacing": float(self.grid_spacing),
            "trace_tolerance": float(self.trace_tolerance),
        }


def boundary_profile(model: ModelSpec, trace: BoundaryTrace,
                     stride: int = 100, *, M: int = 31, refine: int = 0,
                     jobs: int = 1, golden_iters: int = 26,
                     **minimizer_options) -> ProfileTable:
    """V(z*, y) at every stride-th trace vertex, with the minimum flagged.

    The vertex nearest the boundary attractor is always inserted into
    the grid: it is the expected minimizer, and anchoring a point there
    keeps the argmin from landing on a near-tie between two grid points
    straddling it.  The default sequential mode solves center-out from
    that vertex, warm starting every point from its inward neighbor, so
    far-corner targets inherit a working path skeleton instead of a
    cold straight line.  refine > 0 then re-solves each point with the
    cell count doubled that many times (M -> 2M+1), warm started from
    its own coarser path; values at face-constrained targets converge
    from below under refinement, so this sharpens the profile's
    separation around the minimum.  A failed point is retried cold once
    and otherwise left as a nan row listed in gaps.

    jobs > 1 computes points concurrently with cold starts instead.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = len(trace.polyline)
    z_bar = np.asarray(model.boundary_attractor, dtype=float)
    pin = int(np.argmin(np.linalg.norm(trace.polyline - z_bar, axis=1)))
    idx = sorted(set(range(0, n, stride)) | {n - 1, pin})
    arc = trace.arclength
    s_vals = arc[idx]
    pts = trace.polyline[idx]
    z_star = np.asarray(model.endemic, dtype=float)

    V = np.full(len(idx), math.nan)
    paths: list = [None] * len(idx)
    times: list = [None] * len(idx)
    gaps = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        args = [(model, z_star, y, M, refine, golden_iters, minimizer_options)
                for y in pts]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for i, v in enumerate(ex.map(_profile_point, args)):
                V[i] = v
                if math.isnan(v):
                    gaps.append(i)
    else:
        def solve(i, init, t_range, cells):
            return minimize_discrete_action(
                model, z_star, pts[i], M=cells, T_total=None,
                init_path=init, t_range=t_range,
                golden_iters=golden_iters, **minimizer_options)

        p0 = idx.index(pin)
        order = [p0] + list(range(p0 - 1, -1, -1)) + list(range(p0 + 1, len(idx)))
        for i in order:
            nb = i + 1 if i < p0 else i - 1
            init, t_range = None, FREE_T_RANGE
            if i != p0 and paths[nb] is not None:
                init = paths[nb]
                t_range = (max(FREE_T_RANGE[0], 0.4 * times[nb]),
                           min(FREE_T_RANGE[1], 2.5 * times[nb]))
            try:
                r = solve(i, init, t_range, M)
            except ExitlabError:
                try:
                    r = solve(i, None, FREE_T_RANGE, M)
                except ExitlabError:
                    gaps.append(i)
                    continue
            V[i] = r.value
            paths[i] = r.path.points
            times[i] = r.diagnostics["T"]

        cells = M
        for _ in range(refine):
            cells = 2 * cells + 1
            for i in range(len(idx)):
                if paths[i] is None:
                    continue
                t_range = (max(FREE_T_RANGE[0], 0.6 * times[i]),
                           min(FREE_T_RANGE[1], 1.6 * times[i]))
                try:
                    r = solve(i, paths[i], t_range, cells)
                except ExitlabError:
                    continue  # the coarser value stands
                V[i] = r.value
                paths[i] = r.path.points
                times[i] = r.diagnostics["T"]

    gaps.sort()
    ok = np.isfinite(V)
    if not ok.any():
        raise NonConvergence("every profile point failed",
                             diagnostics={"n_points": len(idx)})
    vmin = float(np.min(V[ok]))
    excess = V - vmin
    argmin = int(np.flatnonzero(ok)[np.argmin(V[ok])])
    spacing = float(np.median(np.diff(s_vals))) if len(s_vals) > 1 else 0.0
    dist = float(np.linalg.norm(pts[argmin] - model.boundary_attractor))
    return ProfileTable(
        s=s_vals, points=pts, value=V, excess=excess,
        argmin_index=argmin, attractor_distance=dist,
        gaps=tuple(gaps), grid_spacing=spacing,
        trace_tolerance=trace.tolerance,
    )


def _profile_point(args):
    model, z_star, y, M, refine, golden_iters, options = args
    try:
        r = minimize_discrete_action(model, z_star, y, M=M, T_total=None,
                                     golden_iters=golden_iters, **options)
        cells = M
        for _ in range(refine):
            cells = 2 * cells + 1
            T = r.diagnostics["T"]
            r = minimize_discrete_action(
                model, z_star, y, M=cells, T_total=None,
                init_path=r.path.points,
                t_range=(max(FREE_T_RANGE[0], 0.6 * T),
                         min(FREE_T_RANGE[1], 1.6 * T)),
                golden_iters=golden_iters, **options)
        return r.value
    except ExitlabError:
        return math.nan
