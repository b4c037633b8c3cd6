import math
import os

import numpy as np
import pytest

from src.coherence import CoherenceLaw
from src.config import load_config, parse_config
from src.errors import ConfigError, ParameterDomainError, SingularDesignError
from src.measurement import CameraModel
from src.sensitivity import (detuning_scan, eta_best, eta_single, eta_single_curve, fit_eta, fit_pulse_scaling,
                             jacobian_b, monte_carlo_sigma_b, sigma_b, t2_scaling)
from src.sensitivity_scan import SensitivityScanner, write_sensitivity_report
from src.signal_model import SignalModelParams, closed_form_signal
from src.spin_dynamics import field_from_rabi, rabi_from_field


def test_jacobian_at_one_microsecond(nv_params):
    assert jacobian_b([1.0], nv_params)[0] == pytest.approx(0.09014, rel=1e-3)


def test_jacobian_matches_finite_difference(nv_params, constants):
    tau = np.linspace(0.2, 8.0, 40)
    b0 = field_from_rabi(nv_params.omega, constants)
    h = 1e-6

    def signal(b):
        p = SignalModelParams(rabi_from_field(b, constants), nv_params.detuning, nv_params.t2, nv_params.contrast)
        return closed_form_signal(tau, p)

    numeric = (signal(b0 + h) - signal(b0 - h)) / (2 * h)
    jac = jacobian_b(tau, nv_params, constants)
    big = np.abs(jac) > 1e-3
    assert -numeric[big] == pytest.approx(jac[big], rel=1e-6)


def test_jacobian_needs_positive_detuning():
    with pytest.raises(ParameterDomainError):
        jacobian_b([1.0], SignalModelParams(7.76, -140.0))


def test_sigma_b():
    assert sigma_b(4.0, [1.0]) == pytest.approx(2.0)
    jac = [0.1, 0.05, 0.02]
    assert sigma_b(1e-4, jac + jac) == pytest.approx(sigma_b(1e-4, jac) / math.sqrt(2))
    with pytest.raises(SingularDesignError):
        sigma_b(1e-4, [0.0, 0.0])
    with pytest.raises(ParameterDomainError):
        sigma_b(-1.0, [1.0])


def test_fit_eta_recovers_both_terms():
    times = [10.0, 31.6, 100.0, 316.0]
    fit = fit_eta([(t, 0.5 / math.sqrt(t) + 0.001) for t in times])
    assert fit.eta == pytest.approx(0.5, rel=1e-6)
    assert fit.sigma0 == pytest.approx(0.001, rel=1e-4)


def test_fit_eta_free_exponent():
    fit = fit_eta([(t, 0.3 * t ** -0.5) for t in (10.0, 100.0, 1000.0)], free_exponent=True)
    assert fit.exponent == pytest.approx(-0.5)
    assert fit.eta == pytest.approx(0.3)


@pytest.mark.parametrize("samples", [
    [(10.0, 0.1), (20.0, 0.07)],
    [(10.0, 0.1), (20.0, 0.07), (40.0, 0.05)],
    [(10.0, 0.1), (100.0, 0.0), (316.0, 0.01)],
])
def test_fit_eta_rejects(samples):
    with pytest.raises(ParameterDomainError):
        fit_eta(samples)


def test_pulse_scaling():
    counts = [2, 8, 32, 64]
    assert fit_pulse_scaling([(n, 1.0 / n) for n in counts]) == pytest.approx(1.0)
    assert fit_pulse_scaling([(n, 0.2) for n in counts]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ParameterDomainError):
        fit_pulse_scaling([(2, 1.0), (8, 0.5)])


def test_t2_scaling():
    assert t2_scaling([(2, 3.2), (64, 13.2)]) == pytest.approx(0.40888, rel=1e-4)


def test_eta_single_is_infinite_where_the_sine_vanishes(nv_params, camera):
    tau = nv_params.detuning / nv_params.omega ** 2
    value = eta_single(tau, nv_params, camera)
    assert value.infinite
    assert math.isinf(value.ut_per_sqrt_hz)


def test_eta_single_is_linear_in_readout_noise(nv_params):
    a = eta_single(1.0, nv_params, CameraModel(sigma_s=1.0))
    b = eta_single(1.0, nv_params, CameraModel(sigma_s=2.0))
    assert not a.infinite
    assert b.eta == pytest.approx(2.0 * a.eta)


def test_eta_single_curve_matches_pointwise(nv_params, camera):
    tau = np.array([0.5, 1.0, 2.5, 6.0])
    curve = eta_single_curve(tau, nv_params, camera)
    assert curve == pytest.approx([eta_single(t, nv_params, camera).eta for t in tau])
    with pytest.raises(ParameterDomainError):
        eta_single_curve([0.0, 1.0], nv_params, camera)


def test_coherence_law():
    law = CoherenceLaw()
    assert law.t2(2) == pytest.approx(3.2)
    assert law.t2(64) == pytest.approx(13.2516, rel=1e-4)
    assert law.t2(np.array([2, 64])) == pytest.approx([3.2, 13.2516], rel=1e-4)
    with pytest.raises(ParameterDomainError):
        law.t2(0)
    with pytest.raises(ParameterDomainError):
        CoherenceLaw(t2_ref=0.0)


def test_eta_best_without_drive(camera):
    best = eta_best(SignalModelParams(0.0, 140.0), camera)
    assert best.no_signal
    assert math.isinf(best.eta)


def test_eta_best_far_detuned(camera, constants):
    p = SignalModelParams(rabi_from_field(0.75, constants), 5000.0, 13.25, 0.05)
    best = eta_best(p, camera, constants)
    assert best.ut_per_sqrt_hz == pytest.approx(84.7, rel=0.01)
    assert best.tau_star == pytest.approx(9.1, abs=0.3)
    assert not best.no_signal


def test_eta_best_rejects_coarse_grid(nv_params, camera):
    with pytest.raises(ParameterDomainError):
        eta_best(nv_params, camera, grid=10)


def test_detuning_scan_favours_small_detuning(camera):
    rows = detuning_scan([500.0, 1000.0, 2000.0, 5000.0], 0.75, camera, 13.25, 0.05, grid=500)
    etas = [eta for _, eta, _ in rows]
    assert [d for d, _, _ in rows] == [500.0, 1000.0, 2000.0, 5000.0]
    assert all(a < b for a, b in zip(etas, etas[1:]))


@pytest.mark.slow
def test_monte_carlo_scatter_matches_jacobian(nv_params):
    tau = np.linspace(0.2, 8.0, 40)
    empirical, predicted = monte_carlo_sigma_b(nv_params, CameraModel(sigma_s=0.01, seed=2), tau, 288.0, 200)
    assert empirical == pytest.approx(predicted, rel=0.2)


@pytest.fixture
def scan_config(tmp_path):
    return parse_config({
        "schema_version": 1,
        "scenario": "sensitivity-scan",
        "seed": 5,
        "output_dir": str(tmp_path / "scan"),
        "camera": {"sigma_s": 1.9, "roi_pixels": 100},
        "sensitivity": {"pulse_counts": [2, 8, 16], "detunings": [500.0, 5000.0], "grid_points": 500},
    }, env={})


def test_scanner_pipeline(scan_config):
    report = SensitivityScanner(scan_config).run()
    assert sorted(report.eta) == [2, 8, 16]
    assert report.eta[16] < report.eta[2]
    assert report.p is not None and report.p > 0
    assert report.s_t2 == pytest.approx(0.41, rel=1e-9)
    assert len(report.sigma_b_samples[8]) == 4
    # reference-scaled variance leaves no floor
    assert report.sigma0[8] == pytest.approx(0.0, abs=1e-9)
    assert report.eta_best * 1e3 == pytest.approx(84.7, rel=0.01)
    assert math.isfinite(report.demo["eta_best_ut_per_sqrt_hz"])
    assert report.assumptions["sigma_eff"] == pytest.approx(0.19)


def test_scanner_is_deterministic(scan_config):
    a = SensitivityScanner(scan_config).run()
    b = SensitivityScanner(scan_config, threads=3).run()
    assert a.eta == b.eta


def test_scanner_skips_pulse_scaling_with_two_counts(tmp_path):
    cfg = parse_config({"schema_version": 1, "scenario": "sensitivity-scan", "seed": 1,
                        "sensitivity": {"pulse_counts": [2, 8], "detunings": [1000.0], "grid_points": 200}},
                       env={})
    report = SensitivityScanner(cfg).run()
    assert report.p is None
    assert report.s_t2 == pytest.approx(0.41, rel=1e-9)
    paths = write_sensitivity_report(report, str(tmp_path))
    assert all(os.path.exists(p) for p in paths)
    with open(paths[0], encoding="utf-8") as f:
        assert "p = n/a" in f.read()


@pytest.mark.slow
def test_monte_carlo_scatter_falls_as_inverse_root_time(nv_params):
    tau = np.linspace(0.2, 8.0, 40)
    cam = CameraModel(sigma_s=0.01, seed=8)
    samples = []
    for i, total in enumerate((10.0, 31.6, 316.0)):
        empirical, _ = monte_carlo_sigma_b(nv_params, cam, tau, total, 300, seed_offset=1000 * i)
        samples.append((total, empirical))
    fit = fit_eta(samples, free_exponent=True)
    assert fit.exponent == pytest.approx(-0.5, abs=0.05)


@pytest.mark.slow
def test_shipped_pulse_count_scan():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    cfg = load_config(os.path.join(root, "sensitivity_config.json"), env={})
    report = SensitivityScanner(cfg).run()
    assert 0.4 <= report.p <= 1.2
    counts = sorted(report.eta)
    assert counts == [2, 8, 16, 32, 64]
    assert all(report.eta[a] > report.eta[b] for a, b in zip(counts, counts[1:]))
    assert report.eta[2] / report.eta[64] >= 4.0
    assert report.s_t2 == pytest.approx(0.41, rel=1e-9)
    far = [row for row in report.detuning_scan if row[0] == 5000.0]
    assert len(far) == 1
    assert far[0][1] * 1e3 == pytest.approx(84.7, rel=0.01)
    assert report.eta_best == far[0][1]
    assert report.assumptions["headline_detuning_mhz"] == 5000.0


def test_headline_detuning_selects_scan_row(tmp_path):
    cfg = parse_config({
        "schema_version": 1,
        "scenario": "sensitivity-scan",
        "seed": 5,
        "output_dir": str(tmp_path / "scan"),
        "camera": {"sigma_s": 1.9, "roi_pixels": 100},
        "sensitivity": {"pulse_counts": [2, 8], "detunings": [500.0, 5000.0], "headline_detuning": 500.0,
                        "grid_points": 500},
    }, env={})
    report = SensitivityScanner(cfg).run()
    row = [r for r in report.detuning_scan if r[0] == 500.0][0]
    assert (report.eta_best, report.tau_star) == (row[1], row[2])
    assert report.eta_best < [r for r in report.detuning_scan if r[0] == 5000.0][0][1]


def test_headline_detuning_must_be_scanned(tmp_path):
    with pytest.raises(ConfigError, match="headline_detuning"):
        parse_config({
            "schema_version": 1,
            "scenario": "sensitivity-scan",
            "seed": 5,
            "sensitivity": {"detunings": [500.0, 5000.0], "headline_detuning": 140.0},
        }, env={})
