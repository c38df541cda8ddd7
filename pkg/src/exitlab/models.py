"""Jump-process model definitions.

A model is a list of integer jump vectors h_j and nonnegative rate
functions beta_j on a planar domain (a simplex {x,y >= 0, x+y <= 1} or a
truncating box {x,y >= 0, x+y <= R}).  The scaled process jumps by h_j/N
at rate N*beta_j(state); its fluid limit is the drift field
b(z) = sum_j beta_j(z) h_j.

Four built-ins are provided:

    sirs            k=3, recovery returns straight to susceptible
    sir_demography  k=4, constant birth of susceptibles, per-capita death
    siv             k=7, imperfect vaccination, bistable regime
    s0is1           k=5, partial immunity after recovery, bistable regime

State is always (x, y) = (infectives, susceptibles-or-vaccinated
fraction), d=2.  The rate functions are polynomials, so they evaluate
(and differentiate) everywhere; domain membership is enforced only at
the public operation boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .errors import OutOfDomain, RegimeViolation, RootFindFailure, UnknownModel

__all__ = [
    "DomainSpec",
    "ModelSpec",
    "Equilibrium",
    "build_model",
    "rates_and_gradients",
    "drift",
    "drift_jacobian",
    "equilibria",
    "check_positive_span",
    "in_domain",
    "sample_domain",
    "BUILTIN_MODELS",
]

_DOMAIN_TOL = 1e-8


@dataclass(frozen=True)
class DomainSpec:
    """Geometry of the state space A and of the exit boundary.

    kind: "simplex" (x, y >= 0, x+y <= 1) or "box" (x, y >= 0, x+y <= R).
    exit_boundary: "axis" ({x=0} is the characteristic boundary) or
    "separatrix" (characteristic boundary traced numerically).
    """

    kind: str
    exit_boundary: str
    R: float | None = None

    def __post_init__(self):
        if self.kind not in ("simplex", "box"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.exit_boundary not in ("axis", "separatrix"):
            raise ValueError(f"unknown exit boundary {self.exit_boundary!r}")
        if self.kind == "box" and (self.R is None or self.R <= 0):
            raise ValueError("box domain requires R > 0")

    @property
    def cap(self) -> float:
        """Upper bound on x + y (1 for the simplex, R for the box)."""
        return 1.0 if self.kind == "simplex" else float(self.R)


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of a density-dependent jump process.

    rates/rate_gradients are tuples of k callables; each accepts a state
    array of shape (..., d) and returns values of shape (...,) resp.
    (..., d).  The private _rates_all/_grads_all evaluate all reactions
    at once, shape (..., k) resp. (..., k, d).
    """

    name: str
    d: int
    k: int
    jumps: np.ndarray  # (k, d) integer
    rates: tuple
    rate_gradients: tuple
    params: dict
    domain: DomainSpec
    endemic: np.ndarray  # z*
    boundary_attractor: np.ndarray  # z-bar, the equilibrium on the exit boundary
    disease_free: np.ndarray  # stable disease-free point (== z-bar for axis models)
    _rates_all: Callable = field(repr=False, compare=False, default=None)
    _grads_all: Callable = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        jumps = np.asarray(self.jumps)
        if jumps.shape != (self.k, self.d):
            raise ValueError("jumps must have shape (k, d)")
        if not np.issubdtype(jumps.dtype, np.integer):
            raise ValueError("jump vectors must be integer")
        if np.any(np.all(jumps == 0, axis=1)):
            raise ValueError("jump vectors must be nonzero")
        jumps.setflags(write=False)

    @property
    def bistable(self) -> bool:
        return self.domain.exit_boundary == "separatrix"


@dataclass(frozen=True)
class Equilibrium:
    point: np.ndarray
    eigenvalues: np.ndarray
    stability: str  # "stable" | "saddle" | "unstable"


# ----------------------------------------------------------------------
# built-in rate functions (vectorized over leading axes, picklable via
# functools.partial of these module-level definitions)

def _sirs_rates(z, lam, gamma, rho):
    x, y = z[..., 0], z[..., 1]
    return np.stack([lam * x * y, gamma * x, rho * (1.0 - x - y)], axis=-1)


def _sirs_grads(z, lam, gamma, rho):
    x, y = np.broadcast_arrays(z[..., 0], z[..., 1])
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    return np.stack(
        [
            np.stack([lam * y, lam * x], axis=-1),
            np.stack([gamma * one, zero], axis=-1),
            np.stack([-rho * one, -rho * one], axis=-1),
        ],
        axis=-2,
    )


def _sir_demography_rates(z, lam, gamma, mu):
    x, y = z[..., 0], z[..., 1]
    one = np.ones_like(x)
    return np.stack([lam * x * y, (gamma + mu) * x, mu * one, mu * y], axis=-1)


def _sir_demography_grads(z, lam, gamma, mu):
    x, y = np.broadcast_arrays(z[..., 0], z[..., 1])
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    return np.stack(
        [
            np.stack([lam * y, lam * x], axis=-1),
            np.stack([(gamma + mu) * one, zero], axis=-1),
            np.stack([zero, zero], axis=-1),
            np.stack([zero, mu * one], axis=-1),
        ],
        axis=-2,
    )


def _siv_rates(z, beta, gamma, eta, theta, mu, chi):
    x, y = z[..., 0], z[..., 1]
    s = 1.0 - x - y
    return np.stack(
        [
            beta * x * s,
            chi * beta * x * y,
            gamma * x,
            theta * y,
            eta * s,
            mu * x,
            mu * y,
        ],
        axis=-1,
    )


def _siv_grads(z, beta, gamma, eta, theta, mu, chi):
    x, y = np.broadcast_arrays(z[..., 0], z[..., 1])
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    return np.stack(
        [
            np.stack([beta * (1.0 - 2.0 * x - y), -beta * x], axis=-1),
            np.stack([chi * beta * y, chi * beta * x], axis=-1),
            np.stack([gamma * one, zero], axis=-1),
            np.stack([zero, theta * one], axis=-1),
            np.stack([-eta * one, -eta * one], axis=-1),
            np.stack([mu * one, zero], axis=-1),
            np.stack([zero, mu * one], axis=-1),
        ],
        axis=-2,
    )


def _s0is1_rates(z, beta, alpha, mu, r):
    x, y = z[..., 0], z[..., 1]
    s = 1.0 - x - y
    return np.stack(
        [beta * x * s, alpha * x, mu * x, r * beta * x * y, mu * y], axis=-1
    )


def _s0is1_grads(z, beta, alpha, mu, r):
    x, y = np.broadcast_arrays(z[..., 0], z[..., 1])
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    return np.stack(
        [
            np.stack([beta * (1.0 - 2.0 * x - y), -beta * x], axis=-1),
            np.stack([alpha * one, zero], axis=-1),
            np.stack([mu * one, zero], axis=-1),
            np.stack([r * beta * y, r * beta * x], axis=-1),
            np.stack([zero, mu * one], axis=-1),
        ],
        axis=-2,
    )


def _component(fn, j, z):
    return fn(np.asarray(z, dtype=float))[..., j]


def _grad_component(fn, j, z):
    return fn(np.asarray(z, dtype=float))[..., j, :]


_BUILTINS = {
    "sirs": {
        "jumps": [(1, -1), (-1, 0), (0, 1)],
        "param_names": ("lambda", "gamma", "rho"),
        "rates": _sirs_rates,
        "grads": _sirs_grads,
        "domain": ("simplex", "axis"),
    },
    "sir_demography": {
        "jumps": [(1, -1), (-1, 0), (0, 1), (0, -1)],
        "param_names": ("lambda", "gamma", "mu"),
        "rates": _sir_demography_rates,
        "grads": _sir_demography_grads,
        "domain": ("box", "axis"),
    },
    "siv": {
        "jumps": [(1, 0), (1, -1), (-1, 0), (0, -1), (0, 1), (-1, 0), (0, -1)],
        "param_names": ("beta", "gamma", "eta", "theta", "mu", "chi"),
        "rates": _siv_rates,
        "grads": _siv_grads,
        "domain": ("simplex", "separatrix"),
    },
    "s0is1": {
        "jumps": [(1, 0), (-1, 1), (-1, 0), (1, -1), (0, -1)],
        "param_names": ("beta", "alpha", "mu", "r"),
        "rates": _s0is1_rates,
        "grads": _s0is1_grads,
        "domain": ("simplex", "separatrix"),
    },
}

BUILTIN_MODELS = tuple(_BUILTINS)

DEFAULT_BOX_R = 3.0


# ----------------------------------------------------------------------
# membership and sampling

def in_domain(domain: DomainSpec, z, tol: float = _DOMAIN_TOL) -> bool:
    """Closure membership test for the domain A (with a small tolerance)."""
    z = np.asarray(z, dtype=float)
    return bool(np.all(z >= -tol) and z.sum() <= domain.cap + tol)


def _require_in_domain(model: ModelSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.d:
        raise OutOfDomain(f"state has dimension {z.shape[-1]}, expected {model.d}")
    flat = z.reshape(-1, model.d)
    ok = np.all(flat >= -_DOMAIN_TOL, axis=1) & (
        flat.sum(axis=1) <= model.domain.cap + _DOMAIN_TOL
    )
    if not ok.all():
        bad = flat[~ok][0]
        raise OutOfDomain(f"state {bad.tolist()} outside domain closure")
    return z


def sample_domain(model: ModelSpec, rng: np.random.Generator, n: int,
                  margin: float = 0.0) -> np.ndarray:
    """Uniform samples from {x,y >= margin, x+y <= cap - margin}."""
    cap = model.domain.cap
    side = cap - (model.d + 1) * margin
    if side <= 0:
        raise ValueError("margin too large for the domain")
    u = rng.uniform(0.0, side, size=(n, 2))
    over = u.sum(axis=1) > side
    u[over] = side - u[over]
    return u + margin


# ----------------------------------------------------------------------
# model construction

def build_model(name: str, params: dict) -> ModelSpec:
    """Construct one of the built-in models, validating the regime.

    params maps parameter names (strings; "lambda" spelled out) to
    positive reals.  sir_demography accepts an optional "R" (default 3.0)
    for the truncating box.  Raises UnknownModel or RegimeViolation.
    """
    if name not in _BUILTINS:
        raise UnknownModel(
            f"unknown model {name!r}; available: {', '.join(sorted(_BUILTINS))}"
        )
    recipe = _BUILTINS[name]
    pnames = recipe["param_names"]
    extra_ok = {"R"} if recipe["domain"][0] == "box" else set()
    unknown = set(params) - set(pnames) - extra_ok
    if unknown:
        raise RegimeViolation(f"unknown parameters for {name}: {sorted(unknown)}")
    missing = set(pnames) - set(params)
    if missing:
        raise RegimeViolation(f"missing parameters for {name}: {sorted(missing)}")
    values = {p: float(params[p]) for p in pnames}
    for p, v in values.items():
        if not v > 0:
            raise RegimeViolation(f"parameter {p} must be strictly positive, got {v}")
    kind, exit_boundary = recipe["domain"]
    R = float(params.get("R", DEFAULT_BOX_R)) if kind == "box" else None
    domain = DomainSpec(kind=kind, exit_boundary=exit_boundary, R=R)

    kwargs = {p.replace("lambda", "lam"): v for p, v in values.items()}
    rates_all = partial(recipe["rates"], **kwargs)
    grads_all = partial(recipe["grads"], **kwargs)
    jumps = np.array(recipe["jumps"], dtype=int)
    k = len(jumps)
    rate_fns = tuple(partial(_component, rates_all, j) for j in range(k))
    grad_fns = tuple(partial(_grad_component, grads_all, j) for j in range(k))

    endemic, z_bar, dfe = _resolve_equilibria(
        name, values, domain, jumps, rates_all, grads_all
    )

    return ModelSpec(
        name=name,
        d=2,
        k=k,
        jumps=jumps,
        rates=rate_fns,
        rate_gradients=grad_fns,
        params=dict(values, **({"R": R} if R is not None else {})),
        domain=domain,
        endemic=endemic,
        boundary_attractor=z_bar,
        disease_free=dfe,
        _rates_all=rates_all,
        _grads_all=grads_all,
    )


def _resolve_equilibria(name, values, domain, jumps, rates_all, grads_all):
    """Closed forms for the axis models, grid + Newton for the bistable ones."""
    if name == "sirs":
        lam, gamma, rho = values["lambda"], values["gamma"], values["rho"]
        if lam / gamma <= 1.0:
            raise RegimeViolation(
                f"sirs requires R0 = lambda/gamma > 1, got {lam / gamma:.6g}"
            )
        endemic = np.array([rho / lam * (lam - gamma) / (rho + gamma), gamma / lam])
        z_bar = np.array([0.0, 1.0])
        return endemic, z_bar, z_bar.copy()
    if name == "sir_demography":
        lam, gamma, mu = values["lambda"], values["gamma"], values["mu"]
        if lam / (gamma + mu) <= 1.0:
            raise RegimeViolation(
                f"sir_demography requires R0 = lambda/(gamma+mu) > 1, "
                f"got {lam / (gamma + mu):.6g}"
            )
        endemic = np.array([mu / (gamma + mu) - mu / lam, (gamma + mu) / lam])
        z_bar = np.array([0.0, 1.0])
        if not in_domain(domain, endemic):
            raise RegimeViolation("endemic equilibrium falls outside the box A_R")
        return endemic, z_bar, z_bar.copy()

    # bistable models: find and classify all drift fixed points
    roots = _find_equilibria(domain, jumps, rates_all, grads_all)
    interior_stable = [e for e in roots if e.stability == "stable" and e.point[0] > 1e-6]
    saddles = [e for e in roots if e.stability == "saddle" and e.point[0] > 1e-6]
    dfe_stable = [e for e in roots if e.stability == "stable" and abs(e.point[0]) <= 1e-6]
    if len(roots) != 3 or len(interior_stable) != 1 or len(saddles) != 1 \
            or len(dfe_stable) != 1:
        found = [(e.point.round(6).tolist(), e.stability) for e in roots]
        raise RegimeViolation(
            f"{name} parameters do not give the bistable three-equilibrium "
            f"regime (stable endemic + interior saddle + stable disease-free); "
            f"found {found}"
        )
    return (
        interior_stable[0].point,
        saddles[0].point,
        dfe_stable[0].point,
    )


# ----------------------------------------------------------------------
# operations

def rates_and_gradients(model: ModelSpec, z) -> tuple[np.ndarray, np.ndarray]:
    """All k rates and their analytic gradients at state z.

    Returns (rates of shape (..., k), gradients of shape (..., k, d)).
    Raises OutOfDomain for states outside the domain closure.
    """
    z = _require_in_domain(model, z)
    return model._rates_all(z), model._grads_all(z)


def drift(model: ModelSpec, z) -> np.ndarray:
    """Fluid-limit drift b(z) = sum_j beta_j(z) h_j."""
    z = _require_in_domain(model, z)
    beta = model._rates_all(z)
    return beta @ model.jumps.astype(float)


def drift_jacobian(model: ModelSpec, z) -> np.ndarray:
    """Jacobian of the drift, grad b(z) = sum_j h_j (grad beta_j)^T."""
    z = _require_in_domain(model, z)
    grads = model._grads_all(z)  # (..., k, d)
    return np.einsum("ka,...kb->...ab", model.jumps.astype(float), grads)


def _drift_unchecked(model: ModelSpec, z: np.ndarray) -> np.ndarray:
    return model._rates_all(z) @ model.jumps.astype(float)


def _find_equilibria(domain, jumps, rates_all, grads_all, grid: int = 50):
    """Multi-start damped Newton on a grid; dedupe within 1e-8."""
    H = jumps.astype(float)

    def b(Z):
        return rates_all(Z) @ H

    def jac(Z):
        return np.einsum("ka,...kb->...ab", H, grads_all(Z))

    cap = domain.cap
    g = np.linspace(0.0, cap, grid)
    X, Y = np.meshgrid(g, g)
    seeds = np.column_stack([X.ravel(), Y.ravel()])
    seeds = seeds[seeds.sum(axis=1) <= cap + 1e-12]

    Z = seeds.copy()
    active = np.ones(len(Z), dtype=bool)
    res = np.linalg.norm(b(Z), axis=1)
    for _ in range(80):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        Zi = Z[idx]
        A = jac(Zi)
        B = b(Zi)
        try:
            step = np.linalg.solve(A, -B[..., None])[..., 0]
        except np.linalg.LinAlgError:
            A = A + 1e-12 * np.eye(2)
            step = np.linalg.solve(A, -B[..., None])[..., 0]
        # damped update: halve the step until the residual does not grow
        scale = np.ones(len(idx))
        for _ in range(20):
            Znew = Zi + scale[:, None] * step
            rnew = np.linalg.norm(b(Znew), axis=1)
            worse = rnew > res[idx] * (1.0 - 1e-4 * scale) + 1e-15
            if not worse.any():
                break
            scale[worse] *= 0.5
        Z[idx] = Zi + scale[:, None] * step
        res[idx] = np.linalg.norm(b(Z[idx]), axis=1)
        active[idx] = (res[idx] > 1e-13) & (np.abs(Z[idx]).max(axis=1) < 10 * cap)

    converged = res <= 1e-10
    pts = Z[converged]
    margin = 1e-6
    inside = (pts[:, 0] >= -margin) & (pts[:, 1] >= -margin) & (
        pts.sum(axis=1) <= cap + margin
    )
    pts = pts[inside]
    if len(pts) == 0:
        raise RootFindFailure(
            "no drift fixed point found in the domain", residuals=res.min()
        )

    unique: list[np.ndarray] = []
    for p in pts:
        if all(np.linalg.norm(p - q) > 1e-8 for q in unique):
            unique.append(p)

    out = []
    for p in unique:
        A = jac(p[None, :])[0]
        eig = np.linalg.eigvals(A)
        if np.max(eig.real) < -1e-9:
            label = "stable"
        elif np.linalg.det(A) < -1e-12:
            label = "saddle"
        else:
            label = "unstable"
        out.append(Equilibrium(point=p, eigenvalues=eig, stability=label))
    out.sort(key=lambda e: (e.point[0], e.point[1]))
    return out


def equilibria(model: ModelSpec, grid: int = 50) -> list[Equilibrium]:
    """All drift fixed points in the domain, classified by the Jacobian
    spectrum (multi-start damped Newton from a grid of seeds)."""
    return _find_equilibria(
        model.domain, model.jumps, model._rates_all, model._grads_all, grid=grid
    )


def check_positive_span(model: ModelSpec) -> bool:
    """True iff the conic hull of the jump vectors is all of R^d.

    For d=2 this is decided exactly: each of +-e_1, +-e_2 must be a
    nonnegative combination of a single jump vector or of a pair.
    """
    H = model.jumps.astype(float)
    if model.d != 2:
        from scipy.optimize import linprog

        for i in range(model.d):
            for sign in (1.0, -1.0):
                target = np.zeros(model.d)
                target[i] = sign
                res = linprog(
                    c=np.zeros(model.k),
                    A_eq=H.T,
                    b_eq=target,
                    bounds=[(0, None)] * model.k,
                    method="highs",
                )
                if not res.success:
                    return False
        return True

    targets = [np.array(t, dtype=float) for t in ((1, 0), (-1, 0), (0, 1), (0, -1))]
    for target in targets:
        if not _cone_contains_2d(H, target):
            return False
    return True


def _cone_contains_2d(H: np.ndarray, target: np.ndarray) -> bool:
    # single generator pointing exactly along the target
    for h in H:
        cross = h[0] * target[1] - h[1] * target[0]
        if abs(cross) < 1e-12 and np.dot(h, target) > 0:
            return True
    # a pair of linearly independent generators whose cone contains it
    k = len(H)
    for a in range(k):
        for b in range(a + 1, k):
            det = H[a, 0] * H[b, 1] - H[a, 1] * H[b, 0]
            if abs(det) < 1e-12:
                continue
            mu1 = (target[0] * H[b, 1] - target[1] * H[b, 0]) / det
            mu2 = (H[a, 0] * target[1] - H[a, 1] * target[0]) / det
            if mu1 >= -1e-12 and mu2 >= -1e-12:
                return True
    return False
