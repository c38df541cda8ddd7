"""Acceptance gate.

Nine end-to-end criteria, one test each, every tolerance and time
budget fixed here rather than tuned to the implementation.  Each test
appends a PASS/FAIL line to LINES; the conftest terminal-summary hook
prints the collected lines so a full run always ends with a nine-line
scorecard.
"""

import time

import numpy as np

import exitlab

LINES = []


def _record(k: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    LINES.append(f"CRITERION {k}: {status} - {detail}")
    assert ok, LINES[-1]


def test_criterion_1_lln_reproduction(models):
    model = models["sirs"]
    T, N, tol = 10.0, 10_000, 0.05
    t0 = time.perf_counter()
    grid = np.linspace(0.0, T, 4001)
    ode = exitlab.integrate_ode(lambda z: exitlab.drift(model, z),
                                model.endemic, (0.0, T), grid=grid)
    good, worst = 0, 0.0
    for rep in range(100):
        path = exitlab.simulate(model, N, model.endemic, T, seed=rep)
        t = np.concatenate(([0.0], path.times))
        states = np.vstack([path.initial, path.states])
        # each state is held over [t_i, t_{i+1}); compare it against the
        # fluid limit at both ends of its holding interval
        t_next = np.append(t[1:], T)
        sup = 0.0
        for tt in (t, t_next):
            xo = np.interp(tt, ode.grid, ode.points[:, 0])
            yo = np.interp(tt, ode.grid, ode.points[:, 1])
            d = np.hypot(states[:, 0] - xo, states[:, 1] - yo)
            sup = max(sup, float(d.max()))
        worst = max(worst, sup)
        good += sup < tol
    elapsed = time.perf_counter() - t0
    _record(1, good >= 95 and elapsed < 120.0,
            f"sup|Z - Y| < {tol} in {good}/100 replicas at N={N} "
            f"(worst {worst:.4f}), {elapsed:.0f}s")


def test_criterion_2_rate_function_duality(models):
    t0 = time.perf_counter()
    worst_gap, worst_recon = 0.0, 0.0
    ok = True
    for mi, (name, model) in enumerate(sorted(models.items())):
        rng = np.random.Generator(np.random.Philox(key=40 + mi))
        Z = exitlab.sample_domain(model, rng, 1000)
        B, _ = exitlab.rates_and_gradients(model, Z)
        C = rng.uniform(0.1, 2.0, B.shape)
        Hj = model.jumps.astype(float)
        Y = (C * B) @ Hj
        values, thetas = exitlab.lagrangian_many(model, Z, Y)
        ok &= bool(np.isfinite(values).all())
        MU = B * np.exp(thetas @ Hj.T)
        control_cost = exitlab.relative_entropy_f(MU, B).sum(axis=1)
        gap = float(np.abs(values - control_cost).max())
        recon = float(np.linalg.norm(MU @ Hj - Y, axis=1).max())
        worst_gap = max(worst_gap, gap)
        worst_recon = max(worst_recon, recon)
    elapsed = time.perf_counter() - t0
    ok &= worst_gap <= 1e-8 and worst_recon <= 1e-8 and elapsed < 60.0
    _record(2, ok,
            f"4000 pairs: max duality gap {worst_gap:.1e}, max velocity "
            f"reconstruction error {worst_recon:.1e}, {elapsed:.0f}s")


def test_criterion_3_zero_action_characterization(models):
    model = models["sirs"]
    grid = np.linspace(0.0, 40.0, 2001)
    ode = exitlab.integrate_ode(lambda z: exitlab.drift(model, z),
                                np.array([0.30, 0.45]), (0.0, 40.0),
                                grid=grid)
    base = exitlab.path_action(model, ode).value
    bent_pts = ode.points.copy()
    bent_pts[1000] = bent_pts[1000] + np.array([0.05, 0.0])
    bent = exitlab.path_action(model, exitlab.SmoothPath(grid, bent_pts)).value
    _record(3, base <= 1e-6 and bent >= 1e-4,
            f"drift path action {base:.2e} <= 1e-6; one node displaced by "
            f"0.05 gives {bent:.2e} >= 1e-4")


def test_criterion_4_pontryagin_consistency(models, shoot_sirs, shoot_siv):
    ok = True
    details = []
    for name, (res, _) in (("sirs", shoot_sirs), ("siv", shoot_siv)):
        model = models[name]
        pts = res.path.points
        B, _ = exitlab.rates_and_gradients(model, pts)
        cap = 1e-6 * (1.0 + float(B.sum(axis=1).max()))
        h_abs = np.abs(exitlab.reduced_hamiltonian(model, pts,
                                                   res.path.adjoints))
        h_max = float(h_abs.max())
        ok &= h_max <= cap and res.endpoint_residual <= 1e-4
        details.append(f"{name}: max|H| {h_max:.1e} (cap {cap:.1e}), "
                       f"endpoint residual {res.endpoint_residual:.1e}")
    _record(4, ok, "; ".join(details))


def test_criterion_5_independent_oracle_agreement(shoot_sirs, shoot_siv,
                                                  disc_sirs, disc_siv):
    ok = True
    details = []
    pairs = (("sirs", shoot_sirs, disc_sirs), ("siv", shoot_siv, disc_siv))
    for name, (sres, s_secs), (dres, d_secs) in pairs:
        gap = abs(sres.value - dres.value) / sres.value
        ok &= gap <= 0.02 and s_secs < 300.0 and d_secs < 300.0
        details.append(
            f"{name}: shooting {sres.value:.6f} ({s_secs:.0f}s) vs "
            f"discrete {dres.value:.6f} ({d_secs:.0f}s), gap {gap:.2%}")
    _record(5, ok, "; ".join(details))


def test_criterion_6_unique_boundary_minimizer(profiles):
    ok = True
    details = []
    for name in ("sirs", "sir_demography", "siv", "s0is1"):
        table, _, _ = profiles[name]
        allow = table.grid_spacing + table.trace_tolerance
        others = np.delete(table.excess, table.argmin_index)
        sep = float(np.min(others)) if len(others) else np.inf
        ok &= (len(table.gaps) == 0
               and table.attractor_distance <= allow
               and sep >= 1e-3)
        details.append(f"{name}: argmin {table.attractor_distance:.1e} from "
                       f"the attractor (allow {allow:.1e}), runner-up excess "
                       f"{sep:.1e}")
    _record(6, ok, "; ".join(details))


def test_criterion_7_exit_concentration(siv_exit_report):
    report, secs = siv_exit_report
    frac = [report.batch(N).fraction_near for N in report.N_list]
    se = [report.batch(N).fraction_stderr for N in report.N_list]
    finite = bool(np.all(np.isfinite(frac)))
    monotone = all(frac[i + 1] >= frac[i] - max(se[i], se[i + 1])
                   for i in range(len(frac) - 1))
    mode_ok = report.mode_contains_argmin(400)
    ok = (finite and monotone and frac[-1] >= 0.8 and mode_ok
          and secs < 1800.0)
    shown = ", ".join(f"N={N}: {f:.3f}"
                      for N, f in zip(report.N_list, frac))
    _record(7, ok,
            f"fraction of exits within 0.1 of the attractor: {shown}; "
            f"mode bin at N=400 contains profile argmin: {mode_ok}; "
            f"{secs:.0f}s")


def test_criterion_8_rate_ordering(near_critical_report):
    report, _ = near_critical_report
    fit_off = exitlab.scaling_estimate(
        report, lambda rec: abs(float(rec.location[1]) - 0.8) < 0.1)
    fit_bar = exitlab.scaling_estimate(
        report, lambda rec: abs(float(rec.location[1]) - 1.0) < 0.1)
    ok = (fit_off.slope > fit_bar.slope
          and fit_off.ci_low > fit_bar.ci_high)
    _record(8, ok,
            f"-log P slope near (0, 0.8): {fit_off.slope:.4f} "
            f"[{fit_off.ci_low:.4f}, {fit_off.ci_high:.4f}] vs near the "
            f"attractor: {fit_bar.slope:.4f} "
            f"[{fit_bar.ci_low:.4f}, {fit_bar.ci_high:.4f}]")


def test_criterion_9_structural_checks(models, traces):
    ok = True
    details = []
    for name in ("sirs", "sir_demography", "siv", "s0is1"):
        model = models[name]
        span = exitlab.check_positive_span(model)
        tangency = exitlab.characteristic_check(model, traces[name])
        ok &= span and tangency <= 1e-3
        details.append(f"{name}: span {span}, tangency {tangency:.1e}")

    horizons = {"sirs": 1900.0, "sir_demography": 6800.0,
                "siv": 1600.0, "s0is1": 3200.0}
    total_events = 0
    contained = True
    for name, model in models.items():
        path = exitlab.simulate(model, 200, model.endemic, horizons[name],
                                reflect=True, seed=5)
        total_events += len(path.times)
        states = path.states
        contained &= bool(np.all(states >= -1e-12))
        contained &= float(states.sum(axis=1).max()) <= model.domain.cap + 1e-12
        if model.bistable:
            # no post-event state may sit beyond the separatrix ambiguity
            # band on the outward side
            locator = exitlab.TraceLocator(traces[name])
            band = traces[name].tolerance
            hint = None
            for p in states:
                _, dist, hint = locator.query(p, hint=hint)
                if dist > band:
                    contained = False
                    break
    ok &= contained and total_events >= 1_000_000
    details.append(f"{total_events} reflected events, all states inside "
                   f"the closed basin: {contained}")
    _record(9, ok, "; ".join(details))
