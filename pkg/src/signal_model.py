"""Contrast-vs-tau signals: closed form and phase-averaged simulation."""
import csv
import json
import logging
import math
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import fft, ndimage, signal

from .coherence import CoherenceLaw
from .errors import DatasetError, ParameterDomainError
from .pulse_sequences import CONTROL, WAIT, WINDOW, PulseSequence
from .spin_dynamics import DriveParams, ac_zeeman_shift, drive_unitary, ideal_rotation

ArrayLike = Union[float, np.ndarray]

DEFAULT_PHASE_STEP = 0.01
CHUNK_SIZE = 512
TRACE_COLUMNS = ("tau_us", "contrast", "sigma")


@dataclass(frozen=True)
class SignalModelParams:
    """Signal parameters. t2=None defers to the pulse-count coherence law."""

    omega: float
    detuning: float
    t2: Optional[float] = 3.2
    contrast: float = 0.05
    resonance: float = 2560.0

    def __post_init__(self):
        if not (np.isfinite(self.omega) and self.omega >= 0):
            raise ParameterDomainError(f"omega must be >= 0, got {self.omega}")
        if not np.isfinite(self.detuning):
            raise ParameterDomainError(f"detuning must be finite, got {self.detuning}")
        if self.t2 is not None and not self.t2 > 0:
            raise ParameterDomainError(f"t2 must be > 0, got {self.t2}")
        if not 0 < self.contrast <= 1:
            raise ParameterDomainError(f"contrast must lie in (0, 1], got {self.contrast}")

    @property
    def signal_drive(self) -> DriveParams:
        return DriveParams(self.detuning, self.omega, 0.0)


@dataclass
class SignalTrace:
    tau_grid: np.ndarray
    contrast: np.ndarray
    noise_sigma: np.ndarray = None
    integration_time: float = 0.0
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tau_grid = np.asarray(self.tau_grid, dtype=float)
        self.contrast = np.asarray(self.contrast, dtype=float)
        if self.noise_sigma is None:
            self.noise_sigma = np.zeros_like(self.contrast)
        self.noise_sigma = np.broadcast_to(np.asarray(self.noise_sigma, dtype=float),
                                           self.contrast.shape).copy()
        if self.tau_grid.shape != self.contrast.shape:
            raise ParameterDomainError(
                f"tau grid and contrast differ in length: {self.tau_grid.size} vs {self.contrast.size}")
        if self.tau_grid.size > 1 and np.any(np.diff(self.tau_grid) <= 0):
            raise ParameterDomainError("tau grid must be strictly increasing")

    def __len__(self) -> int:
        return self.tau_grid.size


def decay_factor(free_evolution: ArrayLike, t2: float) -> ArrayLike:
    if math.isinf(t2):
        return np.ones_like(np.asarray(free_evolution, dtype=float))
    return np.exp(-np.asarray(free_evolution, dtype=float) / t2)


def contrast_from_population(population: ArrayLike, free_evolution: ArrayLike, t2: float,
                             contrast: float) -> ArrayLike:
    """Map readout population of |-> onto normalized PL contrast."""
    coherent = (2.0 * np.asarray(population) - 1.0) * decay_factor(free_evolution, t2)
    return 1.0 - 0.5 * contrast * (1.0 - coherent)


def closed_form_signal(tau: ArrayLike, p: SignalModelParams, mode: str = "approx",
                       t2: Optional[float] = None) -> ArrayLike:
    t2 = t2 if t2 is not None else p.t2
    if t2 is None:
        raise ParameterDomainError("closed form needs an explicit t2")
    if p.omega == 0:
        f_acz = 0.0
    else:
        f_acz = ac_zeeman_shift(p.detuning, p.omega, mode).value
    tau = np.asarray(tau, dtype=float)
    out = 1.0 - (1.0 - np.cos(2.0 * math.pi * f_acz * tau) * decay_factor(2.0 * tau, t2)) * p.contrast / 2.0
    return out if out.ndim else float(out)


def rabi_contrast(durations: ArrayLike, control_rabi: float, contrast: float,
                  t2: float = math.inf) -> ArrayLike:
    durations = np.asarray(durations, dtype=float)
    return 1.0 - 0.5 * contrast * (1.0 - np.cos(2.0 * math.pi * control_rabi * durations)
                                   * decay_factor(2.0 * durations, t2))


def transition_probability(tau: ArrayLike, rabi: float, detuning: float, phase: ArrayLike,
                           tau_half_pi: float = 0.0) -> ArrayLike:
    """Probability of ending in |+> after pi/2 - window - pi/2 starting from |->.

    The window opens at tau_half_pi, so the signal phase seen by the spin is
    phase - 2 pi detuning tau_half_pi.
    """
    tau = np.asarray(tau, dtype=float)
    phase = np.asarray(phase, dtype=float)
    w = math.hypot(detuning, rabi)
    cos_t = detuning / w if w > 0 else 1.0
    sin_t = rabi / w if w > 0 else 0.0
    a = math.pi * w * tau
    b = math.pi * detuning * tau
    first = (np.cos(a) * np.cos(b) + cos_t * np.sin(a) * np.sin(b)) ** 2
    second = (sin_t * np.sin(a) * np.sin(-b - 2.0 * math.pi * detuning * tau_half_pi + phase)) ** 2
    return first + second


def phase_grid(step: float = DEFAULT_PHASE_STEP) -> np.ndarray:
    if not 0 < step <= 0.1:
        raise ParameterDomainError(f"phase grid step must lie in (0, 0.1], got {step}")
    return np.linspace(0.0, 2.0 * math.pi, int(round(2.0 * math.pi / step)), endpoint=False)


def _apply(u: np.ndarray, psi: np.ndarray) -> np.ndarray:
    # explicit 2x2 product keeps every element independent of batch shape
    return np.stack([u[..., 0, 0] * psi[..., 0] + u[..., 0, 1] * psi[..., 1],
                     u[..., 1, 0] * psi[..., 0] + u[..., 1, 1] * psi[..., 1]], axis=-1)


def sequence_populations(seqs: Sequence[PulseSequence], signal_drive: DriveParams, phases: np.ndarray,
                         pulse_error: ArrayLike = 0.0, static_detuning: float = 0.0) -> np.ndarray:
    """Population of |-> after each sequence for each initial signal phase.

    All sequences must share one structure. The frame rotates with the
    control drive; a window of length d opening at elapsed time t0 is
    Z(d) U(detuning + static_detuning, rabi, phase - 2 pi detuning t0, d).
    `pulse_error` scales every control rotation by (1 + pulse_error) and may
    be given per sequence. Returns an array of shape (len(seqs), len(phases)).
    """
    structure = seqs[0].structure
    if any(s.structure != structure for s in seqs):
        raise ParameterDomainError("sequences in one batch must share a structure")
    n_seq = len(seqs)
    phases = np.asarray(phases, dtype=float)
    scale = 1.0 + np.broadcast_to(np.asarray(pulse_error, dtype=float), (n_seq,))
    det = signal_drive.detuning
    psi = np.zeros((n_seq, phases.size, 2), dtype=complex)
    psi[..., 1] = 1.0
    elapsed = np.zeros(n_seq)

    for j, (kind, _) in enumerate(structure):
        segs = [s.segments[j] for s in seqs]
        durations = np.array([s.duration for s in segs])
        first = segs[0]
        if kind == CONTROL:
            if np.all(durations == 0):
                u = ideal_rotation(first.angle * scale, first.drive.phase)[:, None]
            else:
                rabis = np.array([s.drive.rabi for s in segs]) * scale
                u = drive_unitary(static_detuning, rabis, first.drive.phase, durations)[:, None]
            psi = _apply(u, psi)
        elif kind == WAIT:
            if static_detuning != 0.0:
                u = drive_unitary(static_detuning, 0.0, 0.0, durations)[:, None]
                psi = _apply(u, psi)
        elif kind == WINDOW:
            phi = signal_drive.phase + phases[None, :] - 2.0 * math.pi * det * elapsed[:, None]
            u = drive_unitary(det + static_detuning, signal_drive.rabi, phi, durations[:, None])
            arg = math.pi * det * durations
            u[..., 0, :] *= np.exp(1j * arg)[:, None, None]
            u[..., 1, :] *= np.exp(-1j * arg)[:, None, None]
            psi = _apply(u, psi)
        elapsed = elapsed + durations
    return np.abs(psi[..., 1]) ** 2


def _resolve_t2(seq: PulseSequence, p: Optional[SignalModelParams], coherence: Optional[CoherenceLaw]) -> float:
    if seq.free_evolution == 0:
        return math.inf
    if p is not None and p.t2 is not None:
        return p.t2
    return (coherence or CoherenceLaw()).t2(max(seq.n_pi, 1))


def simulate_trace(seqs: Sequence[PulseSequence], signal_drive: Optional[DriveParams] = None,
                   params: Optional[SignalModelParams] = None,
                   phase_grid_step: float = DEFAULT_PHASE_STEP, pulse_error: ArrayLike = 0.0,
                   static_detuning: float = 0.0, coherence: Optional[CoherenceLaw] = None,
                   threads: int = 1, chunk_size: int = CHUNK_SIZE) -> np.ndarray:
    """Phase-averaged contrast for every sequence, in input order.

    Sequences are grouped by structure and processed in chunks; each chunk
    is independent, so the thread count never changes the result.
    """
    if signal_drive is None:
        if params is None:
            raise ParameterDomainError("either signal_drive or params is required")
        signal_drive = params.signal_drive
    contrast = params.contrast if params is not None else 1.0
    phases = phase_grid(phase_grid_step)
    errors = np.broadcast_to(np.asarray(pulse_error, dtype=float), (len(seqs),))

    groups: "OrderedDict[tuple, List[int]]" = OrderedDict()
    for i, seq in enumerate(seqs):
        groups.setdefault(seq.structure, []).append(i)
    jobs = []
    for idx in groups.values():
        for k in range(0, len(idx), chunk_size):
            jobs.append(idx[k:k + chunk_size])

    def run(job: List[int]) -> np.ndarray:
        pops = sequence_populations([seqs[i] for i in job], signal_drive, phases, errors[job],
                                    static_detuning)
        return pops.mean(axis=1)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    out = np.empty(len(seqs))
    for job, pops in zip(jobs, results):
        for i, pop in zip(job, pops):
            seq = seqs[i]
            out[i] = contrast_from_population(pop, seq.free_evolution, _resolve_t2(seq, params, coherence),
                                              contrast)
    logging.info(f"Simulated {len(seqs)} sequences in {len(jobs)} chunks over {phases.size} signal phases")
    return out


def simulate_signal(seq: PulseSequence, signal_drive: Optional[DriveParams] = None,
                    phase_grid_step: float = DEFAULT_PHASE_STEP,
                    params: Optional[SignalModelParams] = None, **kwargs) -> float:
    return float(simulate_trace([seq], signal_drive, params, phase_grid_step, **kwargs)[0])


def comb_dip_spacing(n_pi: int, detuning: float) -> float:
    """Spacing (us) of the narrow dips the phase-continuous drive leaves on an XY8-N trace.

    The drive phase advances 4*pi*detuning*gap between signal windows; kicks
    add coherently whenever that advance is a quarter turn off a multiple of pi.
    """
    if n_pi < 8 or n_pi % 8:
        raise ParameterDomainError(f"dip spacing is defined for XY8-N pulse counts, got {n_pi}")
    if detuning <= 0:
        raise ParameterDomainError(f"detuning must be positive, got {detuning}")
    return n_pi / (8.0 * detuning)


def comb_dip_taus(n_pi: int, detuning: float, stop: float) -> np.ndarray:
    """Predicted dip positions (m + 1/2) * spacing up to `stop` us."""
    spacing = comb_dip_spacing(n_pi, detuning)
    count = int(math.floor(stop / spacing - 0.5)) + 1
    return (np.arange(max(count, 0)) + 0.5) * spacing


def lowpass_filter(trace: SignalTrace, cutoff: float, method: str = "fft", numtaps: int = 101,
                   median_window: float = 0.0, baseline_degree: int = 4) -> SignalTrace:
    """Keep the content of the contrast series below `cutoff` (MHz).

    A running median over `median_window` us (skipped when it spans fewer
    than 3 samples) first removes narrow one-sided dips, whose mean no linear
    filter can take out. A Chebyshev baseline of `baseline_degree` is then
    subtracted; the fft method mirror-pads the remainder and zeroes every bin
    above the cutoff, the fir method runs a zero-phase windowed FIR filter.
    The baseline is added back so slow structure is preserved.
    """
    tau = trace.tau_grid
    if baseline_degree < 0:
        raise ParameterDomainError(f"baseline_degree must be >= 0, got {baseline_degree}")
    min_points = max(4, baseline_degree + 2)
    if tau.size < min_points:
        raise ParameterDomainError(f"low-pass filtering needs at least {min_points} points")
    steps = np.diff(tau)
    dt = steps.mean()
    if np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise ParameterDomainError("low-pass filtering needs a uniform tau grid")
    nyquist = 0.5 / dt
    if not 0 < cutoff < nyquist:
        raise ParameterDomainError(f"cutoff must lie in (0, {nyquist}) MHz, got {cutoff}")
    if median_window < 0:
        raise ParameterDomainError(f"median_window must be >= 0, got {median_window}")

    y = trace.contrast
    size = int(round(median_window / dt))
    if size % 2 == 0:
        size += 1
    if size >= 3:
        y = ndimage.median_filter(y, size=size, mode="nearest")

    baseline = np.polynomial.Chebyshev.fit(tau, y, baseline_degree)(tau)
    rest = y - baseline
    if method == "fft":
        padded = np.concatenate([rest, rest[::-1]])
        spectrum = fft.rfft(padded)
        freqs = fft.rfftfreq(padded.size, d=dt)
        spectrum[freqs > cutoff] = 0.0
        filtered = fft.irfft(spectrum, n=padded.size)[:y.size] + baseline
    elif method == "fir":
        if y.size <= 3 * numtaps:
            raise ParameterDomainError(f"fir filtering needs more than {3 * numtaps} points")
        taps = signal.firwin(numtaps, cutoff, fs=1.0 / dt, pass_zero="lowpass")
        filtered = signal.filtfilt(taps, 1.0, rest) + baseline
    else:
        raise ParameterDomainError(f"unknown filter method '{method}'")

    meta = dict(trace.meta)
    meta.update({"filter": method, "cutoff_mhz": repr(cutoff)})
    if size >= 3:
        meta["median_window_us"] = repr(median_window)
    return SignalTrace(tau.copy(), filtered, trace.noise_sigma.copy(), trace.integration_time, meta)


def write_trace(trace: SignalTrace, path: str, fmt: str = "csv") -> str:
    """Write a trace as CSV (provenance as leading comments) or JSON."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if fmt == "json":
        data = {"meta": dict(sorted(trace.meta.items())), "integration_time_s": trace.integration_time,
                "tau_us": trace.tau_grid.tolist(), "contrast": trace.contrast.tolist(),
                "sigma": trace.noise_sigma.tolist()}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
            f.write("\n")
        return path
    if fmt != "csv":
        raise ParameterDomainError(f"unknown trace format '{fmt}'")
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in sorted(trace.meta.items()):
            f.write(f"# {key}: {value}\n")
        f.write(f"# integration_time_s: {trace.integration_time!r}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in zip(trace.tau_grid, trace.contrast, trace.noise_sigma):
            writer.writerow([repr(float(x)) for x in row])
    return path


def read_trace(path: str) -> SignalTrace:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read trace {path}: {e}")
    try:
        if path.endswith(".json"):
            data = json.loads(text)
            return SignalTrace(data["tau_us"], data["contrast"], data["sigma"],
                               float(data.get("integration_time_s", 0.0)), dict(data.get("meta", {})))
        meta = {}
        rows = []
        lines = text.splitlines()
        body = [line for line in lines if not line.startswith("#")]
        for line in lines:
            if line.startswith("#") and ":" in line:
                key, value = line[1:].split(":", 1)
                meta[key.strip()] = value.strip()
        reader = csv.reader(body)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        for row in reader:
            if row:
                rows.append([float(x) for x in row])
        if not rows:
            raise ValueError("no data rows")
        data = np.array(rows)
        if data.ndim != 2 or data.shape[1] != 3 or not np.all(np.isfinite(data)):
            raise ValueError("malformed data rows")
        integration = float(meta.pop("integration_time_s", 0.0))
        return SignalTrace(data[:, 0], data[:, 1], data[:, 2], integration, meta)
    except (ValueError, KeyError, StopIteration, json.JSONDecodeError, ParameterDomainError) as e:
        raise DatasetError(f"malformed trace {path}: {e}")
