"""Fits of contrast traces and their conversion to microwave amplitude."""
import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lombscargle

from .errors import DatasetError, ParameterDomainError
from .measurement import FieldMap
from .signal_model import SignalTrace, decay_factor
from .spin_dynamics import PhysicalConstants, field_from_rabi

PARAM_ORDER = ("frequency", "t2", "contrast", "offset")
LOWER = {"frequency": 0.0, "t2": 1e-3, "contrast": 0.0, "offset": 0.0}
UPPER = {"frequency": np.inf, "t2": 1e6, "contrast": 2.0, "offset": 2.0}
MAX_NFEV = 200
XTOL = 1e-10
MIN_POINTS = 5


@dataclass
class FitResult:
    """Damped-cosine fit. `kind` names the frequency: f_acz or rabi."""

    params: Dict[str, float]
    stderr: Dict[str, float]
    covariance: np.ndarray
    free_params: List[str]
    residual_variance: float
    converged: bool
    iterations: int
    kind: str = "acz"
    cost: float = 0.0
    message: str = ""

    @property
    def frequency(self) -> float:
        return self.params["frequency"]

    @property
    def frequency_err(self) -> float:
        return self.stderr["frequency"]

    def as_record(self) -> Dict[str, float]:
        name = "f_acz" if self.kind == "acz" else "rabi"
        rec = {name: self.frequency, f"{name}_err": self.frequency_err}
        for key in PARAM_ORDER[1:]:
            rec[key] = self.params[key]
            rec[f"{key}_err"] = self.stderr[key]
        rec.update({"residual_variance": self.residual_variance, "converged": self.converged,
                    "iterations": self.iterations})
        return rec


@dataclass
class ResponsePoint:
    f_mw: float
    detuning: float
    f_acz: float = math.nan
    f_acz_err: float = math.nan
    b_mw: float = math.nan
    b_err: float = math.nan
    ok: bool = False
    message: str = ""


@dataclass
class QuadraticLaw:
    """frequency = a * amplitude**2 through the origin."""

    a: float
    r_squared: float
    max_rel_deviation: float


def damped_cosine(tau: np.ndarray, frequency: float, t2: float, contrast: float, offset: float) -> np.ndarray:
    return offset - 0.5 * contrast * (1.0 - np.cos(2.0 * math.pi * frequency * tau) * decay_factor(2.0 * tau, t2))


def damped_cosine_jacobian(tau: np.ndarray, frequency: float, t2: float, contrast: float,
                           offset: float) -> np.ndarray:
    e = decay_factor(2.0 * tau, t2)
    arg = 2.0 * math.pi * frequency * tau
    cos_e = np.cos(arg) * e
    d_f = -0.5 * contrast * e * np.sin(arg) * 2.0 * math.pi * tau
    d_t2 = np.zeros_like(tau) if math.isinf(t2) else 0.5 * contrast * cos_e * 2.0 * tau / t2 ** 2
    d_c = -0.5 * (1.0 - cos_e)
    d_off = np.ones_like(tau)
    return np.column_stack([d_f, d_t2, d_c, d_off])


def spectral_peak(tau: np.ndarray, y: np.ndarray, n_freq: int = 2000) -> float:
    """Frequency (MHz) of the Lomb-Scargle peak of the mean-removed series."""
    span = tau[-1] - tau[0]
    f_max = 0.5 / np.min(np.diff(tau))
    f_min = 0.25 / span
    freqs = np.linspace(f_min, f_max, n_freq)
    power = lombscargle(tau, y - y.mean(), 2.0 * math.pi * freqs)
    return float(freqs[int(np.argmax(power))])


def _check_trace(trace: SignalTrace) -> None:
    if len(trace) < MIN_POINTS:
        raise ParameterDomainError(f"fit needs at least {MIN_POINTS} points, got {len(trace)}")
    if not (np.all(np.isfinite(trace.contrast)) and np.all(np.isfinite(trace.tau_grid))):
        raise ParameterDomainError("trace holds non-finite values")
    if trace.tau_grid[-1] - trace.tau_grid[0] <= 0:
        raise ParameterDomainError("degenerate tau grid")


def fit_damped_cosine(trace: SignalTrace, fixed: Optional[Dict[str, float]] = None,
                      init_freq: Optional[float] = None, multistart: bool = True,
                      kind: str = "acz") -> FitResult:
    """Weighted trust-region fit of offset - C/2 (1 - cos(2 pi f tau) exp(-2 tau/T2))."""
    _check_trace(trace)
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(PARAM_ORDER)
    if unknown:
        raise ParameterDomainError(f"cannot fix unknown parameters {sorted(unknown)}")
    tau, y = trace.tau_grid, trace.contrast
    free = [name for name in PARAM_ORDER if name not in fixed]
    weights = 1.0 / trace.noise_sigma if np.all(trace.noise_sigma > 0) else np.ones_like(y)

    offset0 = fixed.get("offset", float(y.max()))
    guess = {
        "offset": offset0,
        "contrast": fixed.get("contrast", float(np.clip(2.0 * (offset0 - y.mean()), 1e-3, 1.0))),
        "t2": fixed.get("t2", float(tau[-1] - tau[0])),
    }
    f0 = init_freq if init_freq is not None else spectral_peak(tau, y)
    starts = [f0, 0.5 * f0, 2.0 * f0] if multistart and "frequency" in free else [f0]
    if "frequency" in fixed:
        starts = [fixed["frequency"]]

    lb = np.array([LOWER[n] for n in free])
    ub = np.array([UPPER[n] for n in free])

    def full(x: np.ndarray) -> Dict[str, float]:
        vals = dict(fixed)
        vals.update(zip(free, x))
        return vals

    def residuals(x):
        return (damped_cosine(tau, **full(x)) - y) * weights

    def jacobian(x):
        jac = damped_cosine_jacobian(tau, **{k: full(x)[k] for k in PARAM_ORDER})
        cols = [PARAM_ORDER.index(n) for n in free]
        return jac[:, cols] * weights[:, None]

    best = None
    for f_start in starts:
        guess["frequency"] = f_start
        x0 = np.array([guess[n] for n in free], dtype=float)
        x0 = np.clip(x0, lb + 1e-12 * (1 + np.abs(lb)), np.where(np.isinf(ub), x0 + 1, ub * (1 - 1e-12)))
        if not free:
            break
        res = least_squares(residuals, x0, jac=jacobian, bounds=(lb, ub), method="trf", xtol=XTOL,
                            ftol=1e-12, gtol=1e-12, max_nfev=MAX_NFEV)
        if best is None or res.cost < best.cost:
            best = res

    n, p = y.size, len(free)
    dof = max(n - p, 1)
    if best is None:
        values = full(np.array([]))
        model = damped_cosine(tau, **values)
        resid_var = float(np.sum((y - model) ** 2) / dof)
        return FitResult(values, {k: 0.0 for k in PARAM_ORDER}, np.zeros((0, 0)), [], resid_var, True, 0,
                         kind, 0.0, "all parameters fixed")

    values = full(best.x)
    jac = best.jac
    scale = 2.0 * best.cost / dof
    cov = np.linalg.pinv(jac.T @ jac) * scale
    stderr = {k: 0.0 for k in PARAM_ORDER}
    for i, name in enumerate(free):
        stderr[name] = float(math.sqrt(max(cov[i, i], 0.0)))
    model = damped_cosine(tau, **values)
    resid_var = float(np.sum((y - model) ** 2) / dof)
    converged = bool(best.success and best.status > 0)
    if not converged:
        logging.warning(f"Fit did not converge after {best.nfev} evaluations: {best.message}")
    return FitResult({k: float(v) for k, v in values.items()}, stderr, cov, free, resid_var, converged,
                     int(best.nfev), kind, float(best.cost), str(best.message))


def fit_acz_trace(trace: SignalTrace, fixed: Optional[Dict[str, float]] = None,
                  init_freq: Optional[float] = None, multistart: bool = True) -> FitResult:
    return fit_damped_cosine(trace, fixed, init_freq, multistart, kind="acz")


def fit_rabi_trace(trace: SignalTrace, fixed: Optional[Dict[str, float]] = None,
                   init_freq: Optional[float] = None, multistart: bool = True) -> FitResult:
    """Rabi oscillation; undamped unless a finite t2 is left free or fixed."""
    fixed = {"t2": math.inf, **(fixed or {})}
    return fit_damped_cosine(trace, fixed, init_freq, multistart, kind="rabi")


def amplitude_from_shift(f_acz, detuning, constants: PhysicalConstants = PhysicalConstants(),
                         mode: str = "approx"):
    """Invert the AC Zeeman shift for the field amplitude in mT."""
    f = np.asarray(f_acz, dtype=float)
    d = np.asarray(detuning, dtype=float)
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ParameterDomainError(f"f_acz must be finite and >= 0, got {f_acz}")
    if np.any(d <= 0):
        raise ParameterDomainError(f"detuning must be > 0, got {detuning}")
    if mode == "approx":
        rabi = np.sqrt(2.0 * d * f)
    elif mode == "exact":
        rabi = np.sqrt(f * f + 2.0 * d * f)
    else:
        raise ParameterDomainError(f"unknown shift mode '{mode}'")
    return field_from_rabi(rabi if rabi.ndim else float(rabi), constants)


def amplitude_error(b_mw: float, f_acz: float, f_err: float, detuning: float, mode: str = "approx") -> float:
    """First-order propagation of the shift error to the amplitude."""
    if f_acz <= 0:
        return math.nan
    if mode == "exact":
        return b_mw * (f_acz + detuning) * f_err / (f_acz * f_acz + 2.0 * detuning * f_acz)
    return b_mw * f_err / (2.0 * f_acz)


def _map_parallel(func: Callable, items: Sequence, threads: int) -> List:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def frequency_response(traces: Sequence[SignalTrace], f_mw: Sequence[float], f_nv: float,
                       constants: PhysicalConstants = PhysicalConstants(), mode: str = "approx",
                       fixed: Optional[Dict[str, float]] = None, threads: int = 1) -> List[ResponsePoint]:
    """Fit every trace and convert its shift to amplitude with detuning f_nv - f_mw."""
    if len(traces) != len(f_mw):
        raise ParameterDomainError("one trace per microwave frequency is required")
    if mode == "approx" and any(f >= f_nv for f in f_mw):
        raise ParameterDomainError("approx inversion needs every f_mw below the resonance")

    def one(item: Tuple[SignalTrace, float]) -> ResponsePoint:
        trace, f = item
        point = ResponsePoint(float(f), float(f_nv - f))
        try:
            fit = fit_acz_trace(trace, fixed)
            point.f_acz, point.f_acz_err = fit.frequency, fit.frequency_err
            point.b_mw = float(amplitude_from_shift(fit.frequency, point.detuning, constants, mode))
            point.b_err = amplitude_error(point.b_mw, fit.frequency, fit.frequency_err, point.detuning, mode)
            point.ok = fit.converged
            point.message = "" if fit.converged else fit.message
        except (ParameterDomainError, ValueError, np.linalg.LinAlgError) as e:
            logging.error(f"Frequency response point at {f} MHz failed: {e}")
            point.message = str(e)
        return point

    points = _map_parallel(one, list(zip(traces, f_mw)), threads)
    logging.info(f"Frequency response: {sum(p.ok for p in points)}/{len(points)} points fitted")
    return points


def field_map_from_pixels(pixels: Iterable[Tuple[int, int, float]], height: int, width: int,
                          pixel_size: float = 1.0) -> FieldMap:
    """Assemble (row, col, B) fit results into a map; missing or non-finite pixels are masked."""
    values = np.full((height, width), math.nan)
    for r, c, value in pixels:
        values[r, c] = value
    mask = np.isfinite(values)
    if not mask.any():
        raise DatasetError("every pixel fit failed")
    if not mask.all():
        logging.warning(f"Masked {int((~mask).sum())} pixels with failed fits")
    return FieldMap(np.where(mask, values, 0.0), pixel_size, mask)


def _fit_map(pixel_traces: Sequence[Sequence[SignalTrace]], to_field: Callable[[FitResult], float],
             fitter: Callable[[SignalTrace], FitResult], pixel_size: float, threads: int) -> FieldMap:
    height = len(pixel_traces)
    width = len(pixel_traces[0]) if height else 0
    grid = pixel_traces[0][0].tau_grid if height and width else None
    flat = [(r, c, pixel_traces[r][c]) for r in range(height) for c in range(width)]

    def one(item):
        r, c, trace = item
        if not np.array_equal(trace.tau_grid, grid):
            raise ParameterDomainError("pixel traces must share one tau grid")
        try:
            fit = fitter(trace)
            value = to_field(fit) if fit.converged else math.nan
        except (ParameterDomainError, ValueError, np.linalg.LinAlgError) as e:
            logging.error(f"Pixel ({r}, {c}) fit failed: {e}")
            value = math.nan
        return r, c, value

    return field_map_from_pixels(_map_parallel(one, flat, threads), height, width, pixel_size)


def fit_acz_map(pixel_traces: Sequence[Sequence[SignalTrace]], detuning: float,
                constants: PhysicalConstants = PhysicalConstants(), mode: str = "approx",
                fixed: Optional[Dict[str, float]] = None, pixel_size: float = 1.0, threads: int = 1) -> FieldMap:
    return _fit_map(pixel_traces,
                    lambda fit: float(amplitude_from_shift(fit.frequency, detuning, constants, mode)),
                    lambda trace: fit_acz_trace(trace, fixed), pixel_size, threads)


def fit_rabi_map(pixel_traces: Sequence[Sequence[SignalTrace]],
                 constants: PhysicalConstants = PhysicalConstants(),
                 fixed: Optional[Dict[str, float]] = None, pixel_size: float = 1.0, threads: int = 1) -> FieldMap:
    return _fit_map(pixel_traces, lambda fit: float(field_from_rabi(fit.frequency, constants)),
                    lambda trace: fit_rabi_trace(trace, fixed), pixel_size, threads)


def quadratic_law(amplitudes: Sequence[float], frequencies: Sequence[float]) -> QuadraticLaw:
    b = np.asarray(amplitudes, dtype=float)
    f = np.asarray(frequencies, dtype=float)
    if b.size < 2 or b.size != f.size:
        raise ParameterDomainError("quadratic law needs matching amplitude and frequency lists of length >= 2")
    x = b ** 2
    a = float(np.dot(x, f) / np.dot(x, x))
    model = a * x
    ss_res = float(np.sum((f - model) ** 2))
    ss_tot = float(np.sum((f - f.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dev = float(np.max(np.abs(f - model) / np.abs(model)))
    return QuadraticLaw(a, r2, dev)


def format_report(record: Dict[str, object]) -> str:
    lines = []
    for key, value in record.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_field_map(fmap: FieldMap, path: str, extra: Optional[Dict[str, object]] = None) -> str:
    """CSV matrix (blank cells for masked pixels) plus a JSON header sidecar."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for row, valid in zip(fmap.values, fmap.mask):
            writer.writerow([repr(float(v)) if ok else "" for v, ok in zip(row, valid)])
    header = {"width": fmap.width, "height": fmap.height, "pixel_size_um": fmap.pixel_size, "units": "mT",
              "masked_pixels": int((~fmap.mask).sum())}
    header.update(extra or {})
    with open(os.path.splitext(path)[0] + ".json", "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_field_map(path: str) -> FieldMap:
    try:
        with open(os.path.splitext(path)[0] + ".json", "r", encoding="utf-8") as f:
            header = json.load(f)
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = [[math.nan if cell == "" else float(cell) for cell in row] for row in csv.reader(f)]
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read field map {path}: {e}")
    values = np.array(rows, dtype=float)
    mask = np.isfinite(values)
    return FieldMap(np.where(mask, values, 0.0), float(header["pixel_size_um"]), mask)
