"""Hamiltonian system, shooting, discrete minimizer, boundary profile."""

import numpy as np
import pytest

import exitlab
from exitlab import (HamiltonianPoint, NoConnection, boundary_profile,
                     drift, drift_jacobian, hamiltonian_rhs,
                     linearize_at_equilibrium, minimize_discrete_action,
                     reduced_hamiltonian, shoot_heteroclinic)

# frozen cross-session oracle values for the default parameter sets
V_SIRS_SHOOT = 0.07410051594427794
V_SIRS_DISC48 = 0.07407915850145498
V_SIV_SHOOT = 0.005970230
V_S0IS1_SHOOT = 0.001644154
V_SIR_DEMOGRAPHY_DISC = 0.004164191


def test_rhs_at_zero_adjoint_is_drift(models):
    rng = np.random.Generator(np.random.Philox(key=2))
    for m in models.values():
        for z in exitlab.sample_domain(m, rng, 10):
            dz, dr = hamiltonian_rhs(m, HamiltonianPoint(z=z, r=np.zeros(2)))
            assert np.allclose(dz, drift(m, z), atol=1e-12)
            assert np.allclose(dr, 0.0, atol=1e-12)


def test_rhs_fixed_point_at_equilibrium(models):
    m = models["sirs"]
    p = HamiltonianPoint(z=np.asarray(m.endemic), r=np.zeros(2))
    dz, dr = hamiltonian_rhs(m, p)
    assert np.linalg.norm(dz) <= 1e-10
    assert np.linalg.norm(dr) <= 1e-10


def test_rhs_oracle_value(models):
    m = models["sirs"]
    p = HamiltonianPoint(z=np.array([0.25, 0.5]), r=np.array([1.0, 0.0]))
    dz, _ = hamiltonian_rhs(m, p)
    assert dz[0] == pytest.approx(0.5876005968219007, abs=1e-14)


def test_linearization_symmetric_spectrum(models):
    for m in models.values():
        J, spec, unstable = linearize_at_equilibrium(m, m.endemic)
        scale = 1.0 + np.max(np.abs(spec))
        for lam in spec:
            assert np.min(np.abs(spec + lam)) <= 1e-8 * scale


def test_linearization_upper_left_block(models):
    m = models["siv"]
    J, _, _ = linearize_at_equilibrium(m, m.endemic)
    assert np.allclose(J[:2, :2], drift_jacobian(m, np.asarray(m.endemic)),
                       atol=1e-7)


def test_unstable_subspace_dimension(models):
    _, spec, unstable = linearize_at_equilibrium(models["sirs"],
                                                 models["sirs"].endemic)
    assert unstable.shape[1] == 2


def test_shoot_trivial_target(models):
    m = models["sirs"]
    res = shoot_heteroclinic(m, target=m.endemic)
    assert res.value == 0.0
    assert len(res.path.points) == 0


def test_shoot_sirs_frozen_value(shoot_sirs):
    res, _ = shoot_sirs
    assert res.value == pytest.approx(V_SIRS_SHOOT, rel=1e-6)
    assert res.method == "shooting"


def test_shoot_siv_frozen_value(shoot_siv):
    res, _ = shoot_siv
    assert res.value == pytest.approx(V_SIV_SHOOT, rel=1e-3)


def test_shoot_s0is1_frozen_value(models):
    res = shoot_heteroclinic(models["s0is1"])
    assert res.value == pytest.approx(V_S0IS1_SHOOT, rel=1e-3)
    assert res.endpoint_residual <= 1e-4


def test_sir_demography_shooting_has_no_connection(models):
    with pytest.raises(NoConnection):
        shoot_heteroclinic(models["sir_demography"])


def test_shoot_hamiltonian_conservation(shoot_sirs, models):
    res, _ = shoot_sirs
    m = models["sirs"]
    H = np.array([reduced_hamiltonian(m, z, r)
                  for z, r in zip(res.path.points, res.path.adjoints)])
    max_rate = m._rates_all(res.path.points).sum(axis=1).max()
    assert np.max(np.abs(H)) <= 1e-6 * (1.0 + max_rate)


def test_shoot_cost_equals_r_dz_integral(shoot_sirs):
    res, _ = shoot_sirs
    cost_rz = res.diagnostics.get("cost_rz")
    assert cost_rz is not None
    assert cost_rz == pytest.approx(res.value, rel=2e-3)


def test_shoot_value_nonnegative_and_breakdown(shoot_sirs):
    res, _ = shoot_sirs
    assert res.value >= 0
    assert np.all(np.asarray(res.cost_breakdown) >= -1e-12)
    assert np.sum(res.cost_breakdown) == pytest.approx(res.value, rel=1e-6)


def test_epsilon_halving_invariance(models):
    m = models["sirs"]
    half = shoot_heteroclinic(m, epsilon=0.5e-4)
    assert half.value == pytest.approx(V_SIRS_SHOOT, rel=0.01)


def test_discrete_zero_cost_downhill(models):
    m = models["sirs"]
    res = minimize_discrete_action(m, (0.45, 0.35), m.endemic, M=24)
    assert res.value <= 1e-4


def test_discrete_sirs_frozen_value(disc_sirs):
    res, _ = disc_sirs
    assert res.value == pytest.approx(V_SIRS_DISC48, rel=1e-5)
    assert res.method == "discrete_minimizer"


def test_discrete_m_doubling_stability(models, disc_sirs):
    m = models["sirs"]
    base, _ = disc_sirs
    double = minimize_discrete_action(m, m.endemic, m.boundary_attractor,
                                      M=96)
    assert abs(double.value - base.value) <= 0.01 * base.value


def test_discrete_upper_bounds_shooting(disc_sirs, shoot_sirs):
    disc, _ = disc_sirs
    shoot, _ = shoot_sirs
    assert disc.value >= shoot.value * 0.98


def test_sir_demography_discrete_value(models):
    m = models["sir_demography"]
    res = minimize_discrete_action(m, m.endemic, m.boundary_attractor, M=48)
    assert res.value == pytest.approx(V_SIR_DEMOGRAPHY_DISC, rel=1e-3)


def test_envelope_gradient_matches_fd(models):
    m = models["sirs"]
    res_env = minimize_discrete_action(m, m.endemic, m.boundary_attractor,
                                       M=12, grad_mode="envelope")
    res_fd = minimize_discrete_action(m, m.endemic, m.boundary_attractor,
                                      M=12, grad_mode="fd")
    assert res_env.value == pytest.approx(res_fd.value, rel=1e-4)


def test_profile_basic_shape(profiles, models, traces):
    for name, (table, _, stride) in profiles.items():
        fin = np.isfinite(table.value)
        assert fin.any()
        assert np.all(table.excess[fin] >= -1e-12)
        i = table.argmin_index
        assert table.excess[i] == pytest.approx(0.0, abs=1e-15)
        assert np.all(table.value[fin] > 1e-6)


def test_profile_argmin_at_attractor(profiles, models):
    for name, (table, _, stride) in profiles.items():
        assert table.attractor_distance <= table.grid_spacing + 1e-4


def test_profile_csv(profiles, tmp_path):
    table, _, _ = profiles["sirs"]
    f = tmp_path / "profile.csv"
    table.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "s,y_x,y_y,V,S"
    assert len(lines) == len(table.s) + 1


def test_quasipotential_result_serializes(shoot_sirs):
    res, _ = shoot_sirs
    d = res.as_dict()
    assert d["value"] == res.value
    assert d["method"] == "shooting"
    assert "path" in d and "diagnostics" in d
