"""Shared fixtures.

The expensive objects (models, boundary traces, shooting/minimizer
solves, quasipotential profiles) are computed once per session and
shared between the unit tests and the acceptance gate, with wall-clock
timings kept alongside for the criteria that bound runtime.
"""

import time

import numpy as np
import pytest

import exitlab

DEFAULT_PARAMS = {
    "sirs": {"lambda": 2.0, "gamma": 1.0, "rho": 1.0},
    "sir_demography": {"lambda": 2.0, "gamma": 1.0, "mu": 0.1},
    "siv": {"beta": 4.0, "gamma": 1.0, "eta": 0.5, "theta": 0.05,
            "mu": 0.05, "chi": 0.1},
    "s0is1": {"beta": 0.9, "alpha": 1.0, "mu": 0.2, "r": 3.0},
}

# per-model settings for the boundary quasipotential profiles: coarse
# spacing where the profile is genuinely flat near the minimizer
# (sir_demography face corridor), one refinement pass where coarse
# grids misplace face-target values (sirs, sir_demography)
PROFILE_SETTINGS = {
    "sirs": {"divisor": 16, "M": 31, "refine": 1},
    "sir_demography": {"divisor": 6, "M": 31, "refine": 1},
    "siv": {"divisor": 16, "M": 31, "refine": 0},
    "s0is1": {"divisor": 16, "M": 31, "refine": 0},
}


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def models():
    return {name: exitlab.build_model(name, params)
            for name, params in DEFAULT_PARAMS.items()}


@pytest.fixture(scope="session")
def traces(models):
    return {name: exitlab.trace_boundary(m) for name, m in models.items()}


@pytest.fixture(scope="session")
def shoot_sirs(models):
    return timed(exitlab.shoot_heteroclinic, models["sirs"])


@pytest.fixture(scope="session")
def shoot_siv(models):
    return timed(exitlab.shoot_heteroclinic, models["siv"])


@pytest.fixture(scope="session")
def disc_sirs(models):
    m = models["sirs"]
    return timed(exitlab.minimize_discrete_action, m, m.endemic,
                 m.boundary_attractor, 48)


@pytest.fixture(scope="session")
def disc_siv(models):
    m = models["siv"]
    return timed(exitlab.minimize_discrete_action, m, m.endemic,
                 m.boundary_attractor, 48)


@pytest.fixture(scope="session")
def profiles(models, traces):
    out = {}
    for name, model in models.items():
        cfg = PROFILE_SETTINGS[name]
        trace = traces[name]
        stride = max(1, len(trace.polyline) // cfg["divisor"])
        table, secs = timed(exitlab.boundary_profile, model, trace,
                            stride=stride, M=cfg["M"],
                            refine=cfg["refine"])
        out[name] = (table, secs, stride)
    return out


@pytest.fixture(scope="session")
def siv_exit_report(models):
    report, secs = timed(
        exitlab.run_exit_measure, models["siv"],
        models["siv"].endemic, [100, 200, 400], 1000,
        delta=0.1, horizon=6000.0, seed=0, profile_M=31)
    return report, secs


@pytest.fixture(scope="session")
def near_critical_report():
    model = exitlab.build_model(exitlab.NEAR_CRITICAL_SIRS["name"],
                                exitlab.NEAR_CRITICAL_SIRS["params"])
    report, secs = timed(
        exitlab.run_exit_measure, model, model.endemic,
        [50, 75, 100], 1000, delta=0.1, horizon=400.0, seed=0,
        profile_M=21)
    return report, secs


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import sys
    for modname in ("tests.test_acceptance", "test_acceptance"):
        mod = sys.modules.get(modname)
        if mod is not None and getattr(mod, "LINES", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.LINES:
                terminalreporter.write_line(line)
            break
