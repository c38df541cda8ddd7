"""Model construction, rates, drift, equilibria, and span checks."""

import types

import numpy as np
import pytest

import exitlab
from exitlab import (RegimeViolation, UnknownModel, build_model,
                     check_positive_span, drift, drift_jacobian, equilibria,
                     rates_and_gradients, sample_domain)


def test_unknown_model_raises():
    with pytest.raises(UnknownModel):
        build_model("nosuch", {})


def test_sirs_equilibria_closed_form(models):
    m = models["sirs"]
    assert np.allclose(m.endemic, (0.25, 0.5), atol=1e-12)
    assert np.allclose(m.boundary_attractor, (0.0, 1.0), atol=1e-12)


def test_sir_demography_equilibrium_formula():
    m = build_model("sir_demography",
                    {"lambda": 2.0, "gamma": 0.5, "mu": 0.5})
    assert np.allclose(m.endemic, (0.25, 0.5), atol=1e-10)
    assert np.allclose(m.boundary_attractor, (0.0, 1.0), atol=1e-10)


def test_sirs_subcritical_regime_rejected():
    with pytest.raises(RegimeViolation):
        build_model("sirs", {"lambda": 1.0, "gamma": 2.0, "rho": 1.0})


def test_positive_parameters_required():
    with pytest.raises(RegimeViolation):
        build_model("sirs", {"lambda": 2.0, "gamma": -1.0, "rho": 1.0})


def test_sirs_rates_at_endemic(models):
    rates, grads = rates_and_gradients(models["sirs"], (0.25, 0.5))
    assert np.allclose(rates, (0.25, 0.25, 0.25), atol=1e-14)
    assert np.allclose(grads[0], (1.0, 0.5), atol=1e-14)


def test_infection_rate_vanishes_without_infectives(models):
    for m in models.values():
        rates, _ = rates_and_gradients(m, (0.0, 0.4))
        moves_x_up = m.jumps[:, 0] > 0
        assert np.all(rates[moves_x_up] <= 1e-14)


def test_sirs_drift_values(models):
    m = models["sirs"]
    assert np.allclose(drift(m, (0.25, 0.5)), (0.0, 0.0), atol=1e-12)
    assert np.allclose(drift(m, (0.5, 0.5)), (0.0, -0.5), atol=1e-12)
    assert np.allclose(drift(m, (0.0, 1.0)), (0.0, 0.0), atol=1e-12)


def test_equilibria_are_drift_zeros(models):
    for m in models.values():
        assert np.linalg.norm(drift(m, m.endemic)) <= 1e-10
        assert np.linalg.norm(drift(m, m.boundary_attractor)) <= 1e-10


def test_sirs_equilibria_listing(models):
    eqs = equilibria(models["sirs"])
    pts = np.array([e.point for e in eqs])
    d_end = np.linalg.norm(pts - np.array([0.25, 0.5]), axis=1).min()
    d_dfe = np.linalg.norm(pts - np.array([0.0, 1.0]), axis=1).min()
    assert d_end <= 1e-8 and d_dfe <= 1e-8
    stable = [e for e in eqs
              if np.linalg.norm(np.asarray(e.point) - (0.25, 0.5)) < 1e-6]
    assert stable and stable[0].stability == "stable"


def test_bistable_models_have_three_equilibria(models):
    for name in ("siv", "s0is1"):
        eqs = equilibria(models[name])
        assert len(eqs) >= 3
        labels = {e.stability for e in eqs}
        assert "saddle" in labels and "stable" in labels


def test_saddle_is_boundary_attractor_for_bistable(models):
    for name in ("siv", "s0is1"):
        m = models[name]
        eqs = equilibria(m)
        dist = min(np.linalg.norm(np.asarray(e.point) - m.boundary_attractor)
                   for e in eqs if e.stability == "saddle")
        assert dist <= 1e-7


def test_check_positive_span_builtins(models):
    for m in models.values():
        assert check_positive_span(m)


def test_check_positive_span_quadrant_counterexample():
    fake = types.SimpleNamespace(jumps=np.array([[1, 0], [0, 1]]), d=2, k=2)
    assert not check_positive_span(fake)


def test_gradients_match_finite_differences(models):
    rng = np.random.Generator(np.random.Philox(key=7))
    h = 1e-6
    eye = np.eye(2)
    for m in models.values():
        pts = sample_domain(m, rng, 250, margin=0.01)
        for z in pts:
            rates, grads = rates_and_gradients(m, z)
            for i in range(2):
                rp, _ = rates_and_gradients(m, z + h * eye[i])
                rm, _ = rates_and_gradients(m, z - h * eye[i])
                fd = (rp - rm) / (2 * h)
                scale = np.maximum(np.abs(grads[:, i]), 1.0)
                assert np.all(np.abs(grads[:, i] - fd) <= 1e-5 * scale)


def test_rates_nonnegative_on_random_points(models):
    rng = np.random.Generator(np.random.Philox(key=11))
    for m in models.values():
        pts = sample_domain(m, rng, 1000)
        rates = m._rates_all(pts)
        assert np.all(rates >= 0)


def test_jumps_are_nonzero_integer_vectors(models):
    for m in models.values():
        assert m.jumps.dtype.kind == "i"
        assert np.all(np.any(m.jumps != 0, axis=1))


def test_model_spec_immutable(models):
    with pytest.raises(Exception):
        models["sirs"].endemic = np.zeros(2)


def test_expected_reaction_counts(models):
    expected = {"sirs": 3, "sir_demography": 4, "siv": 7, "s0is1": 5}
    for name, k in expected.items():
        assert models[name].k == k
        assert models[name].d == 2


def test_drift_jacobian_matches_fd(models):
    m = models["siv"]
    z = np.asarray(m.endemic)
    J = drift_jacobian(m, z)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (np.asarray(drift(m, z + e)) - np.asarray(drift(m, z - e))) / (2 * h)
        assert np.allclose(J[:, i], fd, atol=1e-5)
