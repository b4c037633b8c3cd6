"""Two-level spin dynamics in the rotating frame.

Units throughout: frequencies in MHz, times in us, fields in mT. Phases
accumulate as 2*pi*f*t. States are stored as [c_plus, c_minus] with
sigma_z = diag(1, -1).
"""
import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConvergenceError, ParameterDomainError

ArrayLike = Union[float, np.ndarray]

GAMMA_E = 28.02495  # MHz/mT
NV_RABI_FACTOR = 1.0 / math.sqrt(2.0)
TWO_LEVEL_RABI_FACTOR = 0.5
APPROX_GUARD = 5.0


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise ParameterDomainError(f"{name} must be finite, got {value}")


@dataclass(frozen=True)
class SpinState:
    c_plus: complex
    c_minus: complex

    @classmethod
    def plus(cls) -> "SpinState":
        return cls(1.0 + 0j, 0j)

    @classmethod
    def minus(cls) -> "SpinState":
        return cls(0j, 1.0 + 0j)

    @classmethod
    def from_array(cls, vec: np.ndarray) -> "SpinState":
        return cls(complex(vec[0]), complex(vec[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.c_plus, self.c_minus], dtype=complex)

    @property
    def norm(self) -> float:
        return math.sqrt(abs(self.c_plus) ** 2 + abs(self.c_minus) ** 2)

    @property
    def population_plus(self) -> float:
        return abs(self.c_plus) ** 2

    @property
    def population_minus(self) -> float:
        return abs(self.c_minus) ** 2


@dataclass(frozen=True)
class DriveParams:
    """Drive seen in the rotating frame: detuning = f_NV - f_mw."""

    detuning: float
    rabi: float
    phase: float = 0.0

    def __post_init__(self):
        _check_finite(detuning=self.detuning, rabi=self.rabi, phase=self.phase)
        if self.rabi < 0:
            raise ParameterDomainError(f"rabi must be >= 0, got {self.rabi}")
        object.__setattr__(self, "phase", float(np.mod(self.phase, 2.0 * math.pi)))

    @property
    def generalized_rabi(self) -> float:
        return math.hypot(self.detuning, self.rabi)

    @property
    def cos_theta(self) -> float:
        w = self.generalized_rabi
        return self.detuning / w if w > 0 else 1.0

    @property
    def sin_theta(self) -> float:
        w = self.generalized_rabi
        return self.rabi / w if w > 0 else 0.0


@dataclass(frozen=True)
class PhysicalConstants:
    gamma_e: float = GAMMA_E
    rabi_factor: float = NV_RABI_FACTOR

    def __post_init__(self):
        if not self.gamma_e > 0:
            raise ParameterDomainError(f"gamma_e must be > 0, got {self.gamma_e}")
        if not any(math.isclose(self.rabi_factor, f) for f in (NV_RABI_FACTOR, TWO_LEVEL_RABI_FACTOR)):
            raise ParameterDomainError(
                f"rabi_factor must be 1/sqrt(2) or 1/2, got {self.rabi_factor}")


@dataclass(frozen=True)
class AczShift:
    """AC Zeeman shift with the approximation-regime flag."""

    value: float
    mode: str
    approx_regime_warning: bool = False


def drive_unitary(detuning: ArrayLike, rabi: ArrayLike, phase: ArrayLike,
                  duration: ArrayLike) -> np.ndarray:
    """Propagator of a constant drive, broadcast over all arguments.

    Returns an array of shape (..., 2, 2). The sin(pi W t)/W factor is
    evaluated through np.sinc so W = 0 needs no special case.
    """
    detuning, rabi, phase, duration = np.broadcast_arrays(
        np.asarray(detuning, dtype=float), np.asarray(rabi, dtype=float),
        np.asarray(phase, dtype=float), np.asarray(duration, dtype=float))
    w = np.hypot(detuning, rabi)
    c = np.cos(math.pi * w * duration)
    sw = math.pi * duration * np.sinc(w * duration)
    s_cos = detuning * sw
    s_sin = rabi * sw
    u = np.empty(detuning.shape + (2, 2), dtype=complex)
    u[..., 0, 0] = c - 1j * s_cos
    u[..., 0, 1] = -1j * s_sin * np.exp(-1j * phase)
    u[..., 1, 0] = -1j * s_sin * np.exp(1j * phase)
    u[..., 1, 1] = c + 1j * s_cos
    return u


def ideal_rotation(angle: ArrayLike, phase: ArrayLike) -> np.ndarray:
    """Instantaneous rotation by `angle` about the equatorial axis at `phase`."""
    angle, phase = np.broadcast_arrays(np.asarray(angle, dtype=float),
                                       np.asarray(phase, dtype=float))
    c = np.cos(angle / 2.0)
    s = np.sin(angle / 2.0)
    u = np.empty(angle.shape + (2, 2), dtype=complex)
    u[..., 0, 0] = c
    u[..., 0, 1] = -1j * s * np.exp(-1j * phase)
    u[..., 1, 0] = -1j * s * np.exp(1j * phase)
    u[..., 1, 1] = c
    return u


def z_rotation(detuning: ArrayLike, duration: ArrayLike) -> np.ndarray:
    """Diagonal part diag(exp(i pi d t), exp(-i pi d t)) as two arrays."""
    arg = math.pi * np.asarray(detuning, dtype=float) * np.asarray(duration, dtype=float)
    return np.exp(1j * arg), np.exp(-1j * arg)


def propagate_segment(state: SpinState, drive: DriveParams, duration: float) -> SpinState:
    _check_finite(duration=duration)
    if duration < 0:
        raise ParameterDomainError(f"duration must be >= 0, got {duration}")
    if duration == 0:
        return state
    u = drive_unitary(drive.detuning, drive.rabi, drive.phase, duration)
    return SpinState.from_array(u @ state.as_array())


def dressed_energies(detuning: float, rabi: float) -> Tuple[float, float]:
    _check_finite(detuning=detuning, rabi=rabi)
    half = 0.5 * math.hypot(detuning, rabi)
    return half, -half


def acz_frequency(detuning: ArrayLike, rabi: ArrayLike, mode: str = "exact") -> ArrayLike:
    """Vectorized AC Zeeman shift without guards or warnings."""
    detuning = np.asarray(detuning, dtype=float)
    rabi = np.asarray(rabi, dtype=float)
    if mode == "approx":
        out = rabi ** 2 / (2.0 * detuning)
    elif mode == "exact":
        w = np.hypot(detuning, rabi)
        # rationalized form avoids cancellation when detuning >> rabi
        with np.errstate(divide="ignore", invalid="ignore"):
            stable = rabi ** 2 / (w + detuning)
        out = np.where(detuning > 0, stable, w - detuning)
    else:
        raise ParameterDomainError(f"unknown shift mode '{mode}'")
    return out if out.ndim else float(out)


def ac_zeeman_shift(detuning: float, rabi: float, mode: str = "exact",
                    guard: float = APPROX_GUARD) -> AczShift:
    _check_finite(detuning=detuning, rabi=rabi)
    if rabi < 0:
        raise ParameterDomainError(f"rabi must be >= 0, got {rabi}")
    if mode == "approx":
        if detuning <= 0:
            raise ParameterDomainError(f"approx mode needs detuning > 0, got {detuning}")
        warn = detuning < guard * rabi
        if warn:
            logging.warning(f"Approximate AC Zeeman shift outside its regime: "
                            f"detuning {detuning} MHz < {guard} x rabi {rabi} MHz")
        return AczShift(acz_frequency(detuning, rabi, "approx"), mode, warn)
    if mode == "exact":
        if detuning < 0:
            logging.info(f"Exact AC Zeeman shift evaluated at negative detuning {detuning} MHz")
        return AczShift(acz_frequency(detuning, rabi, "exact"), mode, False)
    raise ParameterDomainError(f"unknown shift mode '{mode}'")


def rabi_from_field(b_mw: ArrayLike, constants: PhysicalConstants = PhysicalConstants()) -> ArrayLike:
    b = np.asarray(b_mw, dtype=float)
    if np.any(b < 0) or not np.all(np.isfinite(b)):
        raise ParameterDomainError(f"field amplitude must be finite and >= 0, got {b_mw}")
    out = constants.gamma_e * constants.rabi_factor * b
    return out if out.ndim else float(out)


def field_from_rabi(rabi: ArrayLike, constants: PhysicalConstants = PhysicalConstants()) -> ArrayLike:
    r = np.asarray(rabi, dtype=float)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ParameterDomainError(f"rabi frequency must be finite and >= 0, got {rabi}")
    out = r / (constants.gamma_e * constants.rabi_factor)
    return out if out.ndim else float(out)


def lab_frame_oracle(initial: SpinState, static_field_freq: float, drive_amp_freq: float,
                     f_mw: float, phase: float, duration: float, tol: float = 1e-9,
                     frame: str = "rotating") -> SpinState:
    """Integrate the lab-frame equation with a cosine drive and no RWA.

    H = (f0/2) sigma_z + Omega cos(2 pi f_mw t + phase) sigma_x, so that the
    rotating-wave limit is the drive described by DriveParams(f0 - f_mw,
    Omega, phase). With frame="rotating" the result is moved into the frame
    rotating at f_mw.
    """
    _check_finite(f0=static_field_freq, drive=drive_amp_freq, f_mw=f_mw, phase=phase,
                  duration=duration)
    if not 1e-12 < tol <= 1e-6:
        raise ParameterDomainError(f"tol must lie in (1e-12, 1e-6], got {tol}")
    if frame not in ("rotating", "lab"):
        raise ParameterDomainError(f"unknown frame '{frame}'")
    if duration < 0:
        raise ParameterDomainError(f"duration must be >= 0, got {duration}")

    two_pi = 2.0 * math.pi
    half_f0 = 0.5 * static_field_freq

    def rhs(t, y):
        coupling = drive_amp_freq * math.cos(two_pi * f_mw * t + phase)
        return np.array([-1j * two_pi * (half_f0 * y[0] + coupling * y[1]),
                         -1j * two_pi * (coupling * y[0] - half_f0 * y[1])])

    psi = initial.as_array()
    if duration > 0:
        max_step = 1.0 / (50.0 * max(abs(f_mw), abs(static_field_freq), 1.0))
        sol = solve_ivp(rhs, (0.0, duration), psi, method="RK45", rtol=tol,
                        atol=tol * 1e-2, max_step=max_step)
        if not sol.success:
            raise ConvergenceError(f"lab-frame integration failed: {sol.message}")
        psi = sol.y[:, -1]
    if frame == "rotating":
        z_plus, z_minus = z_rotation(f_mw, duration)
        psi = np.array([z_plus * psi[0], z_minus * psi[1]])
    return SpinState.from_array(psi)


def rwa_oracle(states: np.ndarray, detunings: np.ndarray, rabis: np.ndarray,
               phases: np.ndarray, durations: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Integrate the rotating-frame Hamiltonian numerically for a batch.

    Each case is rescaled to s in [0, 1] so one DOP853 run covers the
    whole batch. `states` has shape (B, 2); the result has the same shape.
    """
    states = np.asarray(states, dtype=complex).reshape(-1, 2)
    detunings, rabis, phases, durations = (np.asarray(a, dtype=float).reshape(-1)
                                           for a in (detunings, rabis, phases, durations))
    if np.any(durations < 0):
        raise ParameterDomainError("durations must be >= 0")
    # -2 pi i t H with H = (d/2) sz + (r/2)(cos p sx + sin p sy)
    gen = np.empty((states.shape[0], 2, 2), dtype=complex)
    gen[:, 0, 0] = 0.5 * detunings
    gen[:, 1, 1] = -0.5 * detunings
    gen[:, 0, 1] = 0.5 * rabis * np.exp(-1j * phases)
    gen[:, 1, 0] = 0.5 * rabis * np.exp(1j * phases)
    gen *= (-2j * math.pi * durations)[:, None, None]

    def rhs(s, y):
        psi = y.reshape(-1, 2)
        return np.einsum("bij,bj->bi", gen, psi).reshape(-1)

    sol = solve_ivp(rhs, (0.0, 1.0), states.reshape(-1), method="DOP853", rtol=tol, atol=tol)
    if not sol.success:
        raise ConvergenceError(f"rotating-frame integration failed: {sol.message}")
    return sol.y[:, -1].reshape(-1, 2)
