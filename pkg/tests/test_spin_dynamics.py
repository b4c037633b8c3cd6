import math

import numpy as np
import pytest

from src.errors import ParameterDomainError
from src.spin_dynamics import (DriveParams, PhysicalConstants, SpinState, ac_zeeman_shift, acz_frequency,
                               dressed_energies, drive_unitary, field_from_rabi, ideal_rotation,
                               lab_frame_oracle, propagate_segment, rabi_from_field, rwa_oracle)


def test_drive_unitary_is_unitary():
    rng = np.random.default_rng(3)
    u = drive_unitary(rng.uniform(-400, 400, 50), rng.uniform(0, 30, 50), rng.uniform(0, 2 * np.pi, 50),
                      rng.uniform(0, 5, 50))
    eye = np.einsum("bji,bjk->bik", u.conj(), u)
    assert np.allclose(eye, np.eye(2), atol=1e-12)


def test_resonant_pi_pulse_flips_state():
    state = propagate_segment(SpinState.minus(), DriveParams(0.0, 10.0, 0.0), 1.0 / 20.0)
    assert state.population_plus == pytest.approx(1.0, abs=1e-12)


def test_zero_duration_is_identity():
    state = SpinState.from_array(np.array([0.6, 0.8j]))
    out = propagate_segment(state, DriveParams(140.0, 7.76, 1.0), 0.0)
    assert out == state


def test_zero_generalized_rabi_is_identity():
    u = drive_unitary(0.0, 0.0, 0.3, 2.0)
    assert np.allclose(u, np.eye(2))


def test_ideal_rotation_matches_short_strong_pulse():
    u_ideal = ideal_rotation(math.pi / 2, math.pi / 2)
    u_drive = drive_unitary(0.0, 10.0, math.pi / 2, 1.0 / 40.0)
    assert np.allclose(u_ideal, u_drive, atol=1e-12)


def test_negative_rabi_rejected():
    with pytest.raises(ParameterDomainError):
        DriveParams(10.0, -1.0)


def test_dressed_energies_split_by_generalized_rabi():
    up, down = dressed_energies(3.0, 4.0)
    assert up - down == pytest.approx(5.0)


def test_acz_exact_and_approx_values():
    exact = ac_zeeman_shift(140.0, 7.76, "exact")
    approx = ac_zeeman_shift(140.0, 7.76, "approx")
    assert exact.value == pytest.approx(0.2148979, rel=1e-6)
    assert approx.value == pytest.approx(0.2150629, rel=1e-6)
    gap = abs(approx.value - exact.value) / exact.value
    assert gap <= (7.76 / 140.0) ** 2


def test_acz_zero_drive_is_zero():
    assert ac_zeeman_shift(140.0, 0.0).value == 0.0


def test_acz_exact_is_stable_at_large_detuning():
    # W - delta would cancel catastrophically here
    value = acz_frequency(1e6, 1e-3, "exact")
    assert value == pytest.approx(1e-6 / 2e6, rel=1e-9)


def test_acz_approx_rejects_nonpositive_detuning():
    with pytest.raises(ParameterDomainError):
        ac_zeeman_shift(0.0, 1.0, "approx")


def test_acz_approx_regime_flag():
    assert ac_zeeman_shift(20.0, 10.0, "approx").approx_regime_warning
    assert not ac_zeeman_shift(140.0, 7.76, "approx").approx_regime_warning


def test_rabi_field_conversion(constants):
    assert rabi_from_field(0.3919, constants) == pytest.approx(7.766, abs=1e-3)
    assert field_from_rabi(rabi_from_field(0.5, constants), constants) == pytest.approx(0.5)
    two_level = PhysicalConstants(rabi_factor=0.5)
    assert rabi_from_field(1.0, two_level) == pytest.approx(28.02495 / 2)


def test_invalid_rabi_factor():
    with pytest.raises(ParameterDomainError):
        PhysicalConstants(rabi_factor=0.3)


def test_negative_field_rejected():
    with pytest.raises(ParameterDomainError):
        rabi_from_field(-0.1)


def test_rwa_oracle_matches_closed_form_small_batch():
    rng = np.random.default_rng(12)
    n = 10
    det = rng.uniform(-20, 20, n)
    rabi = rng.uniform(0, 10, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    dur = rng.uniform(0, 0.5, n)
    states = np.tile([0.0, 1.0], (n, 1)).astype(complex)
    numeric = rwa_oracle(states, det, rabi, phase, dur)
    closed = np.einsum("bij,bj->bi", drive_unitary(det, rabi, phase, dur), states)
    assert np.max(np.abs(numeric - closed)) < 1e-8


@pytest.mark.slow
def test_rwa_oracle_acceptance_grid():
    rng = np.random.default_rng(2024)
    n = 200
    det = rng.uniform(-400, 400, n)
    rabi = rng.uniform(0, 30, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    dur = rng.uniform(0, 5, n)
    raw = rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2))
    states = raw / np.linalg.norm(raw, axis=1)[:, None]
    closed = np.einsum("bij,bj->bi", drive_unitary(det, rabi, phase, dur), states)
    worst = 0.0
    for k in range(0, n, 10):
        sl = slice(k, k + 10)
        numeric = rwa_oracle(states[sl], det[sl], rabi[sl], phase[sl], dur[sl])
        worst = max(worst, float(np.max(np.abs(numeric - closed[sl]))))
    assert worst < 1e-8


@pytest.mark.slow
def test_lab_frame_oracle_approaches_rotating_frame():
    f0, omega, t = 100.0, 2.0, 0.2
    lab = lab_frame_oracle(SpinState.minus(), f0, omega, f0, 0.0, t, tol=1e-9)
    rwa = propagate_segment(SpinState.minus(), DriveParams(0.0, omega, 0.0), t)
    # Bloch-Siegert terms leave a phase, so compare populations
    assert abs(lab.c_plus) == pytest.approx(abs(rwa.c_plus), abs=1e-2)
    assert abs(lab.c_minus) == pytest.approx(abs(rwa.c_minus), abs=1e-2)


def test_lab_frame_oracle_rejects_bad_tolerance():
    with pytest.raises(ParameterDomainError):
        lab_frame_oracle(SpinState.minus(), 10.0, 1.0, 10.0, 0.0, 0.1, tol=1e-3)


@pytest.mark.slow
def test_lab_frame_oracle_at_working_point():
    # Bloch-Siegert shift moves amplitude phases by ~2e-2 rad over 1 us, so compare populations
    lab = lab_frame_oracle(SpinState.minus(), 2560.0, 7.76, 2420.0, 0.0, 1.0, tol=1e-9)
    rwa = propagate_segment(SpinState.minus(), DriveParams(140.0, 7.76, 0.0), 1.0)
    assert lab.population_plus == pytest.approx(rwa.population_plus, abs=5e-4)
    assert lab.population_minus == pytest.approx(rwa.population_minus, abs=5e-4)
    assert lab.norm == pytest.approx(1.0, abs=1e-6)


@pytest.mark.slow
def test_lab_frame_oracle_matches_rotating_frame_components():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        f0 = rng.uniform(300.0, 500.0)
        detuning = rng.uniform(-40.0, 40.0)
        rabi = rng.uniform(0.0, 0.3)
        phase = rng.uniform(0.0, 2 * np.pi)
        duration = rng.uniform(0.0, 0.1)
        vec = rng.normal(size=2) + 1j * rng.normal(size=2)
        initial = SpinState.from_array(vec / np.linalg.norm(vec))
        lab = lab_frame_oracle(initial, f0, rabi, f0 - detuning, phase, duration, tol=1e-9).as_array()
        rot = propagate_segment(initial, DriveParams(detuning, rabi, phase), duration).as_array()
        assert np.max(np.abs(np.concatenate([(lab - rot).real, (lab - rot).imag]))) < 1e-3
