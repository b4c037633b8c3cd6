"""Amplitude sensitivity: Jacobian error model, scaling laws and best-tau search."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares, minimize_scalar, nnls

from .errors import ParameterDomainError, SingularDesignError
from .measurement import CameraModel, make_rng, repetitions_for
from .signal_model import SignalModelParams, closed_form_signal
from .spin_dynamics import PhysicalConstants, field_from_rabi, rabi_from_field

SINE_ZERO = 1e-12
MT_SQRT_S_TO_UT_PER_SQRT_HZ = 1e3
DEFAULT_GRID_POINTS = 2000


@dataclass
class EtaFit:
    eta: float
    sigma0: float = 0.0
    exponent: float = -0.5


@dataclass
class EtaValue:
    """Sensitivity in mT*sqrt(s); infinite when the signal slope vanishes."""

    eta: float
    infinite: bool = False

    @property
    def ut_per_sqrt_hz(self) -> float:
        return self.eta * MT_SQRT_S_TO_UT_PER_SQRT_HZ


@dataclass
class EtaBest:
    eta: float
    tau_star: float
    no_signal: bool = False

    @property
    def ut_per_sqrt_hz(self) -> float:
        return self.eta * MT_SQRT_S_TO_UT_PER_SQRT_HZ


@dataclass
class SensitivityReport:
    sigma_b_samples: Dict[int, List[Tuple[float, float]]] = field(default_factory=dict)
    t2: Dict[int, float] = field(default_factory=dict)
    eta: Dict[int, float] = field(default_factory=dict)
    sigma0: Dict[int, float] = field(default_factory=dict)
    p: Optional[float] = None
    s_t2: Optional[float] = None
    eta_best: Optional[float] = None
    tau_star: Optional[float] = None
    detuning_scan: List[Tuple[float, float, float]] = field(default_factory=list)
    demo: Dict[str, float] = field(default_factory=dict)
    assumptions: Dict[str, object] = field(default_factory=dict)


def jacobian_b(tau_grid, p: SignalModelParams, constants: PhysicalConstants = PhysicalConstants(),
               t2: Optional[float] = None) -> np.ndarray:
    """Magnitude-convention slope of the signal with respect to B_mw (per mT).

    The closed form falls as B grows near tau = 0, so dS/dB = -J.
    """
    t2 = t2 if t2 is not None else p.t2
    if not p.detuning > 0:
        raise ParameterDomainError(f"detuning must be > 0, got {p.detuning}")
    if t2 is None or not t2 > 0:
        raise ParameterDomainError(f"t2 must be > 0, got {t2}")
    tau = np.asarray(tau_grid, dtype=float)
    ratio = p.omega / p.detuning
    return (constants.gamma_e * constants.rabi_factor * math.pi * ratio * tau
            * np.sin(math.pi * p.omega * ratio * tau) * np.exp(-2.0 * tau / t2) * p.contrast)


def sigma_b(residual_variance: float, jac: Sequence[float]) -> float:
    total = float(np.sum(np.square(np.asarray(jac, dtype=float))))
    if total == 0:
        raise SingularDesignError("the Jacobian vanishes on every tau point")
    if residual_variance < 0:
        raise ParameterDomainError(f"residual variance must be >= 0, got {residual_variance}")
    return math.sqrt(residual_variance / total)


def fit_eta(samples: Sequence[Tuple[float, float]], free_exponent: bool = False) -> EtaFit:
    """sigma_B(T) = eta T^-1/2 + sigma0 with both terms >= 0.

    With free_exponent the constant is dropped and the exponent fitted on
    log-log axes instead.
    """
    data = np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[0] < 3:
        raise ParameterDomainError("fit_eta needs at least 3 (T, sigma_B) samples")
    t, s = data[:, 0], data[:, 1]
    if np.any(t <= 0) or np.any(s <= 0):
        raise ParameterDomainError("integration times and sigma_B must be > 0")
    if t.max() / t.min() < 10.0 * (1 - 1e-9):
        raise ParameterDomainError("samples must span at least one decade of integration time")
    if free_exponent:
        slope, intercept = np.polyfit(np.log(t), np.log(s), 1)
        return EtaFit(float(math.exp(intercept)), 0.0, float(slope))
    design = np.column_stack([t ** -0.5, np.ones_like(t)])
    (eta, sigma0), _ = nnls(design, s)
    return EtaFit(float(eta), float(sigma0), -0.5)


def fit_pulse_scaling(etas: Sequence[Tuple[float, float]]) -> float:
    """Exponent p of eta = eta0 * N^-p."""
    data = np.asarray(etas, dtype=float)
    if data.ndim != 2 or data.shape[0] < 3:
        raise ParameterDomainError("pulse scaling needs at least 3 pulse counts")
    if np.any(data <= 0):
        raise ParameterDomainError("pulse counts and sensitivities must be > 0")
    slope, _ = np.polyfit(np.log(data[:, 0]), np.log(data[:, 1]), 1)
    return float(-slope)


def t2_scaling(points: Sequence[Tuple[float, float]]) -> float:
    """Exponent s of T2 proportional to N^s."""
    data = np.asarray(points, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ParameterDomainError("T2 scaling needs at least 2 points")
    if np.any(data <= 0):
        raise ParameterDomainError("pulse counts and T2 must be > 0")
    slope, _ = np.polyfit(np.log(data[:, 0]), np.log(data[:, 1]), 1)
    return float(slope)


def eta_single_curve(tau, p: SignalModelParams, cam: CameraModel,
                     constants: PhysicalConstants = PhysicalConstants(), t2: Optional[float] = None) -> np.ndarray:
    """Sensitivity at fixed tau, vectorized; +inf where the sine vanishes."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ParameterDomainError("tau must be > 0")
    jac = jacobian_b(tau, p, constants, t2)
    sine = np.abs(np.sin(math.pi * p.omega ** 2 * tau / p.detuning))
    cycle = (2.0 * tau + cam.tau_read) * 1e-6
    with np.errstate(divide="ignore"):
        eta = cam.effective_sigma * np.sqrt(cycle) / np.abs(jac)
    return np.where(sine < SINE_ZERO, np.inf, eta)


def eta_single(tau: float, p: SignalModelParams, cam: CameraModel,
               constants: PhysicalConstants = PhysicalConstants(), t2: Optional[float] = None) -> EtaValue:
    value = float(eta_single_curve(np.array([tau]), p, cam, constants, t2)[0])
    if math.isinf(value):
        logging.warning(f"Sensitivity at tau={tau} us is infinite: signal slope vanishes")
    return EtaValue(value, math.isinf(value))


def eta_best(p: SignalModelParams, cam: CameraModel, constants: PhysicalConstants = PhysicalConstants(),
             tau_range: Optional[Tuple[float, float]] = None, grid: int = DEFAULT_GRID_POINTS,
             t2: Optional[float] = None) -> EtaBest:
    """Minimum of the single-tau sensitivity: log grid then golden-section polish."""
    t2 = t2 if t2 is not None else p.t2
    if p.omega == 0:
        return EtaBest(math.inf, math.nan, no_signal=True)
    if grid < 100:
        raise ParameterDomainError(f"grid needs at least 100 points, got {grid}")
    lo, hi = tau_range if tau_range is not None else (1e-2, 20.0 * t2)
    if not 0 < lo < hi:
        raise ParameterDomainError(f"invalid tau range ({lo}, {hi})")
    taus = np.geomspace(lo, hi, grid)
    etas = eta_single_curve(taus, p, cam, constants, t2)
    if not np.any(np.isfinite(etas)):
        raise ParameterDomainError("sensitivity is infinite on the whole tau grid")
    i = int(np.argmin(etas))
    best_tau, best_eta = float(taus[i]), float(etas[i])
    if 0 < i < grid - 1 and etas[i - 1] > best_eta and etas[i + 1] > best_eta:
        res = minimize_scalar(lambda x: float(eta_single_curve(np.array([x]), p, cam, constants, t2)[0]),
                              bracket=(taus[i - 1], taus[i], taus[i + 1]), method="golden",
                              options={"xtol": 1e-10})
        if res.fun < best_eta and lo <= res.x <= hi:
            best_tau, best_eta = float(res.x), float(res.fun)
    return EtaBest(best_eta, best_tau)


def fit_amplitude(tau: np.ndarray, y: np.ndarray, p: SignalModelParams, constants: PhysicalConstants,
                  b_start: float, t2: Optional[float] = None, mode: str = "approx") -> float:
    """One-parameter fit of B_mw with every other signal parameter held."""
    t2 = t2 if t2 is not None else p.t2

    def model(b: float) -> np.ndarray:
        q = SignalModelParams(float(rabi_from_field(max(b, 0.0), constants)), p.detuning, t2, p.contrast,
                              p.resonance)
        return closed_form_signal(tau, q, mode)

    def residuals(x):
        return model(x[0]) - y

    def jac(x):
        q = SignalModelParams(float(rabi_from_field(max(x[0], 0.0), constants)), p.detuning, t2, p.contrast,
                             p.resonance)
        return -jacobian_b(tau, q, constants)[:, None]

    res = least_squares(residuals, np.array([b_start]), jac=jac, bounds=([0.0], [np.inf]), method="trf",
                        xtol=1e-12, max_nfev=200)
    return float(res.x[0])


def monte_carlo_sigma_b(p: SignalModelParams, cam: CameraModel, tau: np.ndarray, total_time: float,
                        trials: int, constants: PhysicalConstants = PhysicalConstants(),
                        seed_offset: int = 0) -> Tuple[float, float]:
    """Empirical scatter of one-parameter amplitude fits against the Jacobian prediction.

    Returns (empirical standard deviation, predicted sigma_B) in mT.
    """
    tau = np.asarray(tau, dtype=float)
    clean = closed_form_signal(tau, p)
    b_true = float(field_from_rabi(p.omega, constants))
    reps = repetitions_for(total_time, 2.0 * tau + cam.tau_read)
    if reps < 1:
        raise ParameterDomainError(f"total_time {total_time} s is too short for one repetition")
    sigma = cam.effective_sigma / math.sqrt(reps)
    estimates = np.empty(trials)
    for k in range(trials):
        rng = make_rng(cam.seed, seed_offset + k)
        y = clean + sigma * rng.standard_normal(tau.size)
        estimates[k] = fit_amplitude(tau, y, p, constants, b_true)
    predicted = sigma_b(sigma ** 2, jacobian_b(tau, p, constants))
    return float(np.std(estimates, ddof=1)), predicted


def detuning_scan(detunings: Sequence[float], b_mw: float, cam: CameraModel, t2: float, contrast: float,
                  constants: PhysicalConstants = PhysicalConstants(), grid: int = DEFAULT_GRID_POINTS,
                  tau_range: Optional[Tuple[float, float]] = None) -> List[Tuple[float, float, float]]:
    """Best sensitivity against detuning: (detuning, eta_best, tau_star) rows."""
    rabi = float(rabi_from_field(b_mw, constants))
    rows = []
    for d in detunings:
        best = eta_best(SignalModelParams(rabi, float(d), t2, contrast), cam, constants, tau_range, grid)
        rows.append((float(d), best.eta, best.tau_star))
    return rows