"""Large-deviation cost layer.

The cost of forcing the scaled jump process along a path phi is
I_T(phi) = int_0^T L(phi_t, phi'_t) dt, where the local cost L is the
Legendre transform of the log moment generating function of the jump
kernel:

    L(z, y) = sup_theta [ <theta, y> - sum_j beta_j(z) (e^{<theta,h_j>} - 1) ]

Equivalently L(z, y) = inf { sum_j f(mu_j, beta_j(z)) : sum_j mu_j h_j = y,
mu >= 0 } with f(nu, omega) = nu log(nu/omega) - nu + omega.  Both forms
are implemented; their agreement (strong duality) is a standing test.

Infinite cost is reported as math.inf used purely as a sentinel value:
callers check for it before doing arithmetic (path_action raises
InfiniteAction instead of integrating through it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfiniteAction, NegativeInput, NonConvergence
from .models import ModelSpec, _require_in_domain

__all__ = [
    "ActionValue",
    "relative_entropy_f",
    "lagrangian",
    "lagrangian_many",
    "velocity_decomposition",
    "path_action",
    "reduced_hamiltonian",
]

THETA_CAP = 40.0
GRAD_TOL = 1e-10
_W_CLIP = 500.0  # exp argument guard for line-search trial points only


def relative_entropy_f(nu, omega):
    """f(nu, omega) = nu log(nu/omega) - nu + omega, elementwise.

    Conventions: f(0, omega) = omega, f(nu, 0) = +inf for nu > 0,
    f(0, 0) = 0.  Raises NegativeInput on negative arguments.
    """
    nu_a = np.asarray(nu, dtype=float)
    om_a = np.asarray(omega, dtype=float)
    if np.any(nu_a < 0) or np.any(om_a < 0):
        raise NegativeInput("relative_entropy_f requires nu, omega >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        val = nu_a * np.log(nu_a / om_a) - nu_a + om_a
    val = np.where(nu_a == 0, om_a, val)
    val = np.where((nu_a > 0) & (om_a == 0), np.inf, val)
    if np.isscalar(nu) and np.isscalar(omega):
        return float(val)
    return val


def reduced_hamiltonian(model: ModelSpec, z, r):
    """H(z, r) = sum_j beta_j(z) (e^{<r, h_j>} - 1).

    This is the Legendre dual of L(z, .); H(z, 0) = 0 and the locally
    optimal controls are mu_j = beta_j(z) e^{<r, h_j>}.
    """
    z = _require_in_domain(model, z)
    r = np.asarray(r, dtype=float)
    beta = model._rates_all(z)
    w = r @ model.jumps.T.astype(float)
    out = np.sum(beta * (np.exp(w) - 1.0), axis=-1)
    return float(out) if out.ndim == 0 else out


def lagrangian_many(model: ModelSpec, Z, Y, *, grad_tol: float = GRAD_TOL,
                    cap: float = THETA_CAP, max_iter: int = 200):
    """Batched Legendre transform: L(z_i, y_i) for rows of Z, Y.

    Damped Newton ascent from theta = 0 on the concave dual objective.
    Returns (values, thetas); rows where the supremum is infinite get
    value inf and theta nan.  Unattained-but-finite suprema (possible
    only where some rates vanish) still terminate through the gradient
    criterion, since the dual gradient tends to zero along the
    maximizing path.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    H = model.jumps.astype(float)
    beta = np.atleast_2d(model._rates_all(Z))
    m = Z.shape[0]

    theta = np.zeros((m, model.d))
    value = np.zeros(m)
    grad = Y - beta @ H
    done = np.linalg.norm(grad, axis=1) <= grad_tol
    diverged = np.zeros(m, dtype=bool)

    eye = np.eye(model.d)
    for _ in range(max_iter):
        act = ~done & ~diverged
        if not act.any():
            break
        idx = np.flatnonzero(act)
        th = theta[idx]
        be = beta[idx]
        y = Y[idx]
        w = th @ H.T
        a = be * np.exp(w)
        ell = np.einsum("ij,ij->i", th, y) - (a - be).sum(axis=1)
        g = y - a @ H
        S = np.einsum("mk,ka,kb->mab", a, H, H)
        lam = 1e-12 * (np.trace(S, axis1=1, axis2=2) + 1.0)
        try:
            step = np.linalg.solve(S + lam[:, None, None] * eye, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = g.copy()
        ascent = np.einsum("ij,ij->i", g, step)
        bad = ascent <= 0
        if bad.any():
            step[bad] = g[bad]
            ascent[bad] = np.einsum("ij,ij->i", g[bad], g[bad])

        # backtracking line search (Armijo) on the concave objective;
        # the noise term keeps the test meaningful once the predicted
        # increase drops below the rounding floor of ell itself
        s = np.ones(len(idx))
        noise = 1e-15 * (1.0 + np.abs(ell))
        trial = th + step
        for _ in range(60):
            wt = np.clip(trial @ H.T, -_W_CLIP, _W_CLIP)
            ell_t = np.einsum("ij,ij->i", trial, y) - (be * (np.exp(wt) - 1.0)).sum(axis=1)
            ok = ell_t - ell >= 1e-4 * s * ascent - noise
            if ok.all():
                break
            s[~ok] *= 0.5
            trial = th + s[:, None] * step
        theta[idx] = trial

        w = np.clip(trial @ H.T, -_W_CLIP, _W_CLIP)
        a = be * np.exp(w)
        g = y - a @ H
        ell = np.einsum("ij,ij->i", trial, y) - (a - be).sum(axis=1)
        conv = np.linalg.norm(g, axis=1) <= grad_tol
        value[idx[conv]] = ell[conv]
        done[idx[conv]] = True
        div = ~conv & (np.abs(trial).max(axis=1) > cap)
        diverged[idx[div]] = True

    open_rows = ~done & ~diverged
    if open_rows.any():
        i = int(np.flatnonzero(open_rows)[0])
        w = theta[i] @ H.T
        g = Y[i] - (beta[i] * np.exp(w)) @ H
        raise NonConvergence(
            f"Legendre transform failed to converge for {int(open_rows.sum())} "
            f"point(s)",
            diagnostics={
                "z": Z[i].tolist(),
                "y": Y[i].tolist(),
                "theta": theta[i].tolist(),
                "grad_norm": float(np.linalg.norm(g)),
            },
        )
    value[diverged] = np.inf
    theta[diverged] = np.nan
    return value, theta


def lagrangian(model: ModelSpec, z, y):
    """Local cost L(z, y) and the maximizing dual variable theta*.

    Returns (value, theta).  value is math.inf (and theta None) when the
    velocity y is not attainable from z, i.e. not in the conic hull of
    the jump directions with positive rate.
    """
    z = _require_in_domain(model, np.asarray(z, dtype=float))
    values, thetas = lagrangian_many(model, z[None, :], np.asarray(y, float)[None, :])
    if math.isinf(values[0]):
        return math.inf, None
    return float(values[0]), thetas[0]


def velocity_decomposition(model: ModelSpec, z, y):
    """Optimal per-reaction intensities mu* with sum_j mu*_j h_j = y.

    mu*_j = beta_j(z) e^{<theta*, h_j>}; satisfies the velocity
    constraint within 1e-8 and sum_j f(mu*_j, beta_j) = L(z, y) within
    1e-8.  Raises InfiniteAction when L(z, y) is infinite.
    """
    value, theta = lagrangian(model, z, y)
    if math.isinf(value):
        raise InfiniteAction(
            f"velocity {np.asarray(y).tolist()} unattainable at state "
            f"{np.asarray(z).tolist()}"
        )
    beta = model._rates_all(np.asarray(z, dtype=float))
    w = model.jumps.astype(float) @ theta
    return beta * np.exp(w)


@dataclass(frozen=True)
class ActionValue:
    """Path cost with a per-reaction split and a quadrature error bar."""

    value: float
    breakdown: np.ndarray  # (k,) per-reaction integrals of f(mu*_j, beta_j)
    quadrature_error_estimate: float

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "breakdown": [float(b) for b in self.breakdown],
            "quadrature_error_estimate": self.quadrature_error_estimate,
        }


def path_action(model: ModelSpec, path) -> ActionValue:
    """I_T(phi) = int L(phi, phi') dt for a SmoothPath.

    Velocities by centered differences on the grid (one-sided at the
    ends), composite trapezoid quadrature, Richardson error estimate
    against the half-density grid.  Raises InfiniteAction if any node
    has infinite local cost.
    """
    t = np.asarray(path.grid, dtype=float)
    pts = np.asarray(path.points, dtype=float)
    if len(t) < 2:
        raise ValueError("path needs at least two grid points")

    vel = np.empty_like(pts)
    vel[1:-1] = (pts[2:] - pts[:-2]) / (t[2:] - t[:-2])[:, None]
    vel[0] = (pts[1] - pts[0]) / (t[1] - t[0])
    vel[-1] = (pts[-1] - pts[-2]) / (t[-1] - t[-2])

    values, thetas = lagrangian_many(model, pts, vel)
    if np.isinf(values).any():
        i = int(np.flatnonzero(np.isinf(values))[0])
        raise InfiniteAction(
            f"infinite local cost at grid node {i} (t={t[i]:.6g}, "
            f"state {pts[i].tolist()}, velocity {vel[i].tolist()})"
        )

    total = float(np.trapezoid(values, t))
    half = float(np.trapezoid(values[::2] if len(t) % 2 == 1
                              else np.append(values[::2], values[-1]),
                              t[::2] if len(t) % 2 == 1
                              else np.append(t[::2], t[-1])))
    err = abs(total - half) / 3.0

    beta = model._rates_all(pts)
    w = thetas @ model.jumps.T.astype(float)
    mu = beta * np.exp(w)
    per_reaction = relative_entropy_f(mu, beta)
    breakdown = np.trapezoid(per_reaction, t, axis=0)
    return ActionValue(value=total, breakdown=breakdown,
                       quadrature_error_estimate=err)
