"""Exact stochastic simulation of the scaled jump process.

The chain lives on the lattice (1/N)Z^2 and is simulated by the direct
method: at state z the next event fires after an Exp(N * sum_j beta_j(z))
waiting time and is reaction j with probability proportional to
beta_j(z).  Rates are constant between jumps, so this is exact; no
leaping approximations anywhere.

State is kept as integer counts (n_x, n_y), which makes lattice
arithmetic exact: the extinction boundary {x = 0} is hit as n_x == 0,
never by a floating-point comparison.

Exit semantics:

  axis models (sirs, sir_demography)
      O = {x > 0} within the domain, so exit = arrival at n_x == 0
      (mode "hit_boundary") for both the free and the reflected chain.
      Proposals through the other faces of the domain are suppressed
      when reflecting (never an exit) or applied and recorded as an
      exit through the non-characteristic boundary when free.

  bistable models (siv, s0is1)
      O = basin of the endemic equilibrium; the side of the traced
      separatrix is tested per event.  Reflected: the first proposal
      whose target crosses is suppressed and recorded (mode
      "suppressed_jump", location = the pre-jump state).  Free: the
      jump is applied and the post-jump state is the exit location
      (mode "hit_boundary").  Targets within the tracer tolerance band
      fall back to an ODE basin classification, cached per lattice
      point.

Per-event side tests are amortized with a travel budget: after a query
returning signed distance d, no new query is needed until the cumulative
jump length could have covered |d| minus the ambiguity band.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .basin import BoundaryTrace, TraceLocator, classify_basin, trace_boundary
from .errors import EmptyLattice, OutOfDomain, UnknownModel
from .models import ModelSpec, in_domain

__all__ = [
    "ExitRecord",
    "JumpPath",
    "project_initial",
    "simulate",
    "exit_experiment",
    "path_to_csv",
    "records_to_csv",
]


@dataclass(frozen=True)
class ExitRecord:
    tau: float
    location: np.ndarray
    proposed_jump: int
    mode: str  # "hit_boundary" | "suppressed_jump"
    N: int
    seed: int
    replica: int | None = None


@dataclass(frozen=True)
class JumpPath:
    model: ModelSpec
    N: int
    initial: np.ndarray
    times: np.ndarray
    reactions: np.ndarray
    states: np.ndarray  # (n_events, 2) post-jump lattice states
    suppressed: np.ndarray  # boolean per event
    exit: ExitRecord | None
    seed: int

    @property
    def events(self):
        """Iterate (time, reaction index, post-jump state) tuples."""
        for i in range(len(self.times)):
            yield (float(self.times[i]), int(self.reactions[i]), self.states[i])

    def final_state(self) -> np.ndarray:
        return self.states[-1] if len(self.states) else self.initial


# ----------------------------------------------------------------------
# integer-count propensity builders (N * beta_j as exact count algebra)

def _props_sirs(params, N):
    a = params["lambda"] / N
    g = params["gamma"]
    r = params["rho"]

    def props(nx, ny, rem):
        return (a * nx * ny, g * nx, r * rem)

    return props


def _props_sir_demography(params, N):
    a = params["lambda"] / N
    gm = params["gamma"] + params["mu"]
    mN = params["mu"] * N
    m = params["mu"]

    def props(nx, ny, rem):
        return (a * nx * ny, gm * nx, mN, m * ny)

    return props


def _props_siv(params, N):
    b = params["beta"] / N
    cb = params["chi"] * params["beta"] / N
    g = params["gamma"]
    th = params["theta"]
    eN = params["eta"]
    m = params["mu"]

    def props(nx, ny, rem):
        return (b * nx * rem, cb * nx * ny, g * nx, th * ny, eN * rem,
                m * nx, m * ny)

    return props


def _props_s0is1(params, N):
    b = params["beta"] / N
    al = params["alpha"]
    m = params["mu"]
    rb = params["r"] * params["beta"] / N

    def props(nx, ny, rem):
        return (b * nx * rem, al * nx, m * nx, rb * nx * ny, m * ny)

    return props


_PROPENSITY_BUILDERS = {
    "sirs": _props_sirs,
    "sir_demography": _props_sir_demography,
    "siv": _props_siv,
    "s0is1": _props_s0is1,
}


def _cap_count(model: ModelSpec, N: int) -> int:
    return int(round(model.domain.cap * N))


# ----------------------------------------------------------------------
# membership machinery for the bistable models

class _SideTester:
    """Is a lattice point on the endemic side of the separatrix?

    Signed polyline distance with warm-started locator queries; targets
    inside the ambiguity band fall back to a cached flow classification.
    """

    def __init__(self, model: ModelSpec, trace: BoundaryTrace):
        self.model = model
        self.locator = TraceLocator(trace)
        self.band = trace.tolerance
        self.hint = None
        self.cache: dict[tuple[int, int], bool] = {}

    def inside(self, x: float, y: float, nx: int, ny: int) -> bool:
        s, d, idx = self.locator.query((x, y), hint=self.hint)
        self.hint = idx
        if d < -self.band:
            self.last_dist = -d
            return True
        if d > self.band:
            self.last_dist = 0.0
            return False
        key = (nx, ny)
        got = self.cache.get(key)
        if got is None:
            got = classify_basin(self.model, (x, y)) != "boundary"
            self.cache[key] = got
        self.last_dist = 0.0
        return got


def project_initial(model: ModelSpec, N: int, z) -> np.ndarray:
    """Nearest lattice representative of z inside the closed domain O-bar.

    Coordinatewise floor of N*z when that lies in O-bar, otherwise the
    nearest lattice point of O-bar (ties by lexicographic order).
    Raises EmptyLattice when no lattice point of O-bar exists.
    """
    z = np.asarray(z, dtype=float)
    if not in_domain(model.domain, z):
        raise OutOfDomain(f"initial point {z.tolist()} outside the domain")
    capN = _cap_count(model, N)

    tester = None
    if model.bistable:
        tester = _SideTester(model, trace_boundary(model))

    def ok(nx, ny):
        if nx < 0 or ny < 0 or nx + ny > capN:
            return False
        if tester is None:
            return True
        return tester.inside(nx / N, ny / N, nx, ny)

    nx0, ny0 = int(math.floor(N * z[0] + 1e-12)), int(math.floor(N * z[1] + 1e-12))
    if ok(nx0, ny0):
        return np.array([nx0 / N, ny0 / N])
    for radius in range(1, capN + 2):
        ring = []
        for dx in range(-radius, radius + 1):
            for dy in (-radius, radius):
                ring.append((nx0 + dx, ny0 + dy))
        for dy in range(-radius + 1, radius):
            for dx in (-radius, radius):
                ring.append((nx0 + dx, ny0 + dy))
        valid = [(nx, ny) for nx, ny in ring if ok(nx, ny)]
        if valid:
            d2 = [(nx / N - z[0]) ** 2 + (ny / N - z[1]) ** 2 for nx, ny in valid]
            best = min(d2)
            ties = sorted(
                (nx, ny) for (nx, ny), dd in zip(valid, d2)
                if dd <= best + 1e-18
            )
            nx, ny = ties[0]
            return np.array([nx / N, ny / N])
    raise EmptyLattice(f"no lattice point of the domain at N={N}")


# ----------------------------------------------------------------------
# the kernel

_BUF = 8192


def _run_chain(model: ModelSpec, N: int, nx: int, ny: int, horizon: float,
               reflect: bool, stop: str, rng, tester: _SideTester | None,
               record: bool, seed: int, replica: int | None = None):
    """Direct-method event loop.  Returns (times, reactions, states,
    suppressed, exit_record, t_final, (nx, ny))."""
    if model.name not in _PROPENSITY_BUILDERS:
        raise UnknownModel(f"no propensity table for model {model.name!r}")
    props = _PROPENSITY_BUILDERS[model.name](model.params, N)
    H = [(int(h[0]), int(h[1])) for h in model.jumps]
    step_len = [math.hypot(hx, hy) / N for hx, hy in H]
    capN = _cap_count(model, N)
    k = model.k
    axis_exit = not model.bistable

    times: list[float] = []
    reactions: list[int] = []
    states: list[tuple[int, int]] = []
    supp: list[bool] = []
    exit_rec: ExitRecord | None = None

    # travel budget for the separatrix side test
    budget = -1.0
    if tester is not None:
        tester.hint = None
        if not tester.inside(nx / N, ny / N, nx, ny):
            raise OutOfDomain(
                f"initial state ({nx / N}, {ny / N}) not on the endemic side"
            )
        budget = tester.last_dist - tester.band

    t = 0.0
    log = math.log
    buf = rng.random(_BUF)
    bi = 0
    want_exit = stop == "at_exit"

    while True:
        a = props(nx, ny, capN - nx - ny)
        total = 0.0
        for v in a:
            total += v
        if total <= 0.0:
            if stop == "at_absorption":
                break
            # frozen state: nothing will ever fire again
            break
        if bi >= _BUF - 2:
            buf = rng.random(_BUF)
            bi = 0
        u1 = buf[bi]
        u2 = buf[bi + 1]
        bi += 2
        t += -log(1.0 - u1) / total
        if t > horizon:
            t = horizon
            break
        r = u2 * total
        acc = 0.0
        j = k - 1
        for jj in range(k):
            acc += a[jj]
            if r < acc:
                j = jj
                break
        hx, hy = H[j]
        tx, ty = nx + hx, ny + hy

        suppressed = False
        exited_now = False
        exit_mode = ""
        exit_loc = None

        if tx < 0 or ty < 0 or tx + ty > capN:
            # proposal through a face of the domain A
            if reflect:
                suppressed = True
            else:
                exited_now = True
                exit_mode = "hit_boundary"
                exit_loc = (tx / N, ty / N)
        elif axis_exit:
            if tx == 0:
                exited_now = True
                exit_mode = "hit_boundary"
                exit_loc = (tx / N, ty / N)
        else:
            budget -= step_len[j]
            if budget <= 0.0:
                if tester.inside(tx / N, ty / N, tx, ty):
                    budget = tester.last_dist - tester.band
                else:
                    exited_now = True
                    budget = 0.0
                    if reflect:
                        suppressed = True
                        exit_mode = "suppressed_jump"
                        exit_loc = (nx / N, ny / N)
                    else:
                        exit_mode = "hit_boundary"
                        exit_loc = (tx / N, ty / N)

        if not suppressed:
            nx, ny = tx, ty
        if record:
            times.append(t)
            reactions.append(j)
            states.append((nx, ny))
            supp.append(suppressed)
        if exited_now and exit_rec is None:
            exit_rec = ExitRecord(
                tau=t, location=np.array(exit_loc), proposed_jump=j,
                mode=exit_mode, N=N, seed=seed, replica=replica,
            )
            if want_exit:
                break

    return times, reactions, states, supp, exit_rec, t, (nx, ny)


def simulate(model: ModelSpec, N: int, z0, horizon: float,
             reflect: bool = False, stop: str = "at_horizon",
             seed: int = 0) -> JumpPath:
    """Exact direct-method simulation of the scaled chain from z0.

    stop: "at_horizon" runs to the time horizon, "at_exit" stops at the
    first exit from O, "at_absorption" stops when the total intensity
    vanishes.  Fixed seed gives a bit-identical event sequence.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if stop not in ("at_horizon", "at_exit", "at_absorption"):
        raise ValueError(f"unknown stop rule {stop!r}")
    z0l = project_initial(model, N, z0)
    nx, ny = int(round(z0l[0] * N)), int(round(z0l[1] * N))
    tester = _SideTester(model, trace_boundary(model)) if model.bistable else None
    rng = np.random.Generator(np.random.Philox(key=seed))
    times, reactions, states, supp, exit_rec, _, _ = _run_chain(
        model, N, nx, ny, horizon, reflect, stop, rng, tester,
        record=True, seed=seed,
    )
    arr_states = np.array(states, dtype=float).reshape(-1, 2) / N
    return JumpPath(
        model=model, N=N, initial=z0l,
        times=np.array(times), reactions=np.array(reactions, dtype=int),
        states=arr_states, suppressed=np.array(supp, dtype=bool),
        exit=exit_rec, seed=seed,
    )


def exit_experiment(model: ModelSpec, N: int, z0, replicas: int,
                    horizon: float, seed: int, reflect: bool = True,
                    _tester: _SideTester | None = None):
    """Independent exit runs; returns (records, censored_count).

    Replica r uses the counter-based stream Philox(seed).jumped(r), so
    results do not depend on execution order and experiments can be
    sharded by replica range.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    z0l = project_initial(model, N, z0)
    nx0, ny0 = int(round(z0l[0] * N)), int(round(z0l[1] * N))
    tester = _tester
    if tester is None and model.bistable:
        tester = _SideTester(model, trace_boundary(model))
    base = np.random.Philox(key=seed)
    records: list[ExitRecord] = []
    censored = 0
    for rep in range(replicas):
        rng = np.random.Generator(base.jumped(rep))
        _, _, _, _, exit_rec, _, _ = _run_chain(
            model, N, nx0, ny0, horizon, reflect, "at_exit", rng, tester,
            record=False, seed=seed, replica=rep,
        )
        if exit_rec is None:
            censored += 1
        else:
            records.append(exit_rec)
    return records, censored


# ----------------------------------------------------------------------
# exports

def path_to_csv(path: JumpPath, fname) -> None:
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "j", "x", "y", "suppressed_flag"])
        for i in range(len(path.times)):
            w.writerow([
                f"{path.times[i]:.12g}", int(path.reactions[i]),
                f"{path.states[i, 0]:.12g}", f"{path.states[i, 1]:.12g}",
                int(path.suppressed[i]),
            ])


def records_to_csv(records, censored: int, fname, *, N=None, seed=None) -> None:
    """One row per replica: exits first, then censored placeholders."""
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "N", "seed", "tau", "exit_x", "exit_y",
                    "mode", "censored"])
        for r in records:
            w.writerow([r.replica, r.N, r.seed, f"{r.tau:.12g}",
                        f"{r.location[0]:.12g}", f"{r.location[1]:.12g}",
                        r.mode, 0])
        for i in range(censored):
            w.writerow(["", N if N is not None else "",
                        seed if seed is not None else "", "", "", "", "", 1])
