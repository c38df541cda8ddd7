"""Exit-measure harness: binning, determinism, reports, scaling fits."""

import json

import numpy as np
import pytest

import exitlab
from exitlab import (ExitMeasureReport, InsufficientData, run_exit_measure,
                     scaling_estimate, write_report)
from exitlab.experiment import _bin_edges, _derive_seed


@pytest.fixture(scope="module")
def small_report(models):
    m = models["sirs"]
    return run_exit_measure(m, m.endemic, [40, 60, 80], 120,
                            horizon=400.0, seed=7, profile_stride=2500,
                            profile_M=15)


def test_bin_grid_centered_on_attractor():
    edges = _bin_edges(0.02, 0.735, 1.0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    assert np.min(np.abs(centers - 0.735)) <= 1e-12
    assert edges[0] >= -1e-12 and edges[-1] <= 1.0 + 0.02


def test_derive_seed_stable():
    a = _derive_seed(123, 0)
    b = _derive_seed(123, 0)
    c = _derive_seed(123, 1)
    assert a == b and a != c


def test_invalid_inputs(models):
    m = models["sirs"]
    with pytest.raises(ValueError):
        run_exit_measure(m, m.endemic, [], 10)
    with pytest.raises(ValueError):
        run_exit_measure(m, m.endemic, [200, 100], 10)


def test_histogram_mass_conservation(small_report):
    rep = small_report
    for N in rep.N_list:
        b = rep.batch(N)
        assert int(b.counts.sum()) + b.censored + b.other_boundary \
            == rep.replicas
        if np.isfinite(b.fraction_near):
            assert 0.0 <= b.fraction_near <= 1.0


def test_sirs_exits_project_to_y_coordinate(small_report):
    rep = small_report
    for N in rep.N_list:
        b = rep.batch(N)
        assert np.all(b.on_trace)
        ys = np.array([rec.location[1] for rec in b.records])
        assert np.all(np.abs(np.sort(b.s_values) - np.sort(ys)) <= 1e-4)


def test_theory_columns_joined(small_report):
    rep = small_report
    assert rep.theory["V_boundary"] > 1e-6
    assert len(rep.theory["bin_S"]) == len(rep.bin_centers)
    assert rep.theory["argmin_s"] == pytest.approx(rep.s_attractor, abs=0.1)


def test_run_deterministic(models, small_report):
    m = models["sirs"]
    again = run_exit_measure(m, m.endemic, [40, 60, 80], 120,
                             horizon=400.0, seed=7, profile_stride=2500,
                             profile_M=15)
    a = json.dumps(small_report.as_dict(), sort_keys=True)
    b = json.dumps(again.as_dict(), sort_keys=True)
    assert a == b


def test_seed_changes_results(models, small_report):
    m = models["sirs"]
    other = run_exit_measure(m, m.endemic, [40], 40, horizon=400.0, seed=8,
                             profile=small_report.profile)
    base = small_report.batch(40)
    assert not np.array_equal(np.sort(other.batch(40).s_values),
                              np.sort(base.s_values))


def test_write_report_manifest(small_report, tmp_path):
    out = tmp_path / "report"
    manifest = write_report(small_report, out)
    expected = {"report.json", "histogram.csv", "profile.csv", "exits.csv",
                "histogram.png", "profile.png"}
    assert set(manifest["files"]) == expected
    on_disk = {p.name for p in out.iterdir()}
    assert on_disk == expected | {"manifest.json"}
    for name, meta in manifest["files"].items():
        assert (out / name).stat().st_size == meta["bytes"]


def test_write_report_rerun_bit_identical(small_report, tmp_path):
    m1 = write_report(small_report, tmp_path / "a")
    m2 = write_report(small_report, tmp_path / "b")
    assert m1["files"] == m2["files"]


def test_write_report_empty_refused(small_report, tmp_path):
    import dataclasses
    empty = dataclasses.replace(small_report, N_list=())
    out = tmp_path / "never"
    with pytest.raises(ValueError):
        write_report(empty, out)
    assert not out.exists()


def test_histogram_csv_schema(small_report, tmp_path):
    write_report(small_report, tmp_path)
    lines = (tmp_path / "histogram.csv").read_text().splitlines()
    assert lines[0] == "N,bin_s,bin_count"
    n_bins = len(small_report.bin_centers)
    assert len(lines) == 1 + n_bins * len(small_report.N_list)


def test_scaling_always_true_event(small_report):
    fit = scaling_estimate(small_report, lambda rec: True)
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert not fit.dropped_N


def test_scaling_insufficient_data(small_report):
    with pytest.raises(InsufficientData):
        scaling_estimate(small_report, lambda rec: False)


def test_scaling_ci_narrows_with_replicas(models, small_report):
    m = models["sirs"]
    big = run_exit_measure(m, m.endemic, [40, 60, 80], 240, horizon=400.0,
                           seed=7, profile=small_report.profile)
    event = lambda rec: rec.location[1] > 0.55
    fit_small = scaling_estimate(small_report, event)
    fit_big = scaling_estimate(big, event)
    assert (fit_big.ci_high - fit_big.ci_low) \
        < (fit_small.ci_high - fit_small.ci_low)


def test_report_round_trips_to_json(small_report):
    d = small_report.as_dict()
    s = json.dumps(d, sort_keys=True)
    back = json.loads(s)
    assert back["replicas"] == small_report.replicas
    assert set(map(int, back["per_N"].keys())) == set(small_report.N_list)
