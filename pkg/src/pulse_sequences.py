"""Pulse protocols as explicit segment lists.

A sequence starts from |-> and ends with a readout pi/2 pulse. Control
pulses are resonant in the frame rotating at the spin resonance; signal
windows carry the off-resonant drive.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .errors import ParameterDomainError
from .spin_dynamics import DriveParams, SpinState, ideal_rotation

CONTROL = "control-pulse"
WINDOW = "signal-window"
WAIT = "wait"
KINDS = (CONTROL, WINDOW, WAIT)

XY8_PATTERN = "XYXYYXYX"
AXIS_PHASE = {"x": 0.0, "X": 0.0, "Y": 0.5 * math.pi, "-x": math.pi}
TIME_TOL = 1e-9

SIGNAL_OFF = DriveParams(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Segment:
    kind: str
    duration: float
    drive: Optional[DriveParams] = None
    label: str = ""
    angle: Optional[float] = None
    start: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterDomainError(f"unknown segment kind '{self.kind}'")
        if not (np.isfinite(self.duration) and self.duration >= 0):
            raise ParameterDomainError(f"segment duration must be >= 0, got {self.duration}")

    @property
    def end(self) -> Optional[float]:
        return None if self.start is None else self.start + self.duration

    @property
    def pulse_label(self) -> str:
        """Label of the nominal pulse this segment belongs to."""
        return self.label.split("#")[0]


@dataclass(frozen=True)
class PulseSequence:
    segments: Tuple[Segment, ...]
    tau: float
    n_pi: int
    total_duration: float
    name: str = ""
    repetitions: int = 0
    free_evolution: float = 0.0
    readout_inverted: bool = True
    composite: bool = False

    @property
    def windows(self) -> List[Segment]:
        return [s for s in self.segments if s.kind == WINDOW]

    @property
    def signal_duration(self) -> float:
        return math.fsum(s.duration for s in self.windows)

    @property
    def pulse_interval(self) -> Optional[float]:
        if self.name == "xy8":
            return self.tau / (4 * self.repetitions)
        if self.name == "cp2":
            return self.tau
        return None

    @property
    def structure(self) -> Tuple[Tuple[str, str], ...]:
        """Kinds and labels; sequences with equal structure batch together."""
        return tuple((s.kind, s.label) for s in self.segments)


@dataclass(frozen=True)
class CompositePulseSpec:
    target_angle: float
    sub_pulses: Tuple[Tuple[float, float], ...]
    target_phase: float = 0.0
    control_rabi: Optional[float] = None

    def durations(self, control_rabi: Optional[float] = None) -> List[float]:
        rabi = control_rabi or self.control_rabi
        if not rabi or rabi <= 0:
            raise ParameterDomainError("sub-pulse durations need control_rabi > 0")
        return [angle / (2.0 * math.pi * rabi) for angle, _ in self.sub_pulses]


@dataclass
class SequenceDiagnostics:
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _assemble(segments: Iterable[Segment], **kwargs) -> PulseSequence:
    placed = []
    t = 0.0
    for seg in segments:
        placed.append(replace(seg, start=t))
        t += seg.duration
    return PulseSequence(segments=tuple(placed), total_duration=t, **kwargs)


def build_scrofulous(target: float, control_rabi: Optional[float] = None,
                     phase: float = 0.0) -> CompositePulseSpec:
    """Three-pulse composite rotation robust to pulse-length errors.

    theta1 solves sinc(theta1) = (2/pi) cos(target/2); the outer pulses
    share phase phi1 and the central pi pulse sits at phi2. For a pi target
    this is pi_60 pi_-60 pi_60.
    """
    if not 0 < target <= math.pi + 1e-12:
        raise ParameterDomainError(f"composite target must lie in (0, pi], got {target}")
    if control_rabi is not None and control_rabi <= 0:
        raise ParameterDomainError(f"control_rabi must be > 0, got {control_rabi}")
    theta1 = brentq(lambda t: math.sin(t) / t - (2.0 / math.pi) * math.cos(target / 2.0), 0.1, 4.6,
                    xtol=1e-15, rtol=4 * np.finfo(float).eps)
    cos_arg = -math.pi * math.cos(theta1) / (2.0 * theta1 * math.sin(target / 2.0))
    phi1 = math.acos(max(-1.0, min(1.0, cos_arg)))
    phi2 = phi1 - math.acos(-math.pi / (2.0 * theta1))
    subs = ((theta1, phi1 + phase), (math.pi, phi2 + phase), (theta1, phi1 + phase))
    return CompositePulseSpec(target_angle=target, sub_pulses=subs, target_phase=phase,
                              control_rabi=control_rabi)


def composite_unitary(pulse: CompositePulseSpec, pulse_error: float = 0.0) -> np.ndarray:
    u = np.eye(2, dtype=complex)
    for angle, phase in pulse.sub_pulses:
        u = ideal_rotation(angle * (1.0 + pulse_error), phase) @ u
    return u


def apply_composite(pulse: CompositePulseSpec, state: SpinState, pulse_error: float = 0.0) -> SpinState:
    return SpinState.from_array(composite_unitary(pulse, pulse_error) @ state.as_array())


def rotation_fidelity(u: np.ndarray, target: np.ndarray) -> float:
    """Gate fidelity |tr(target^dagger u)|^2 / 4, blind to global phase."""
    return float(abs(np.trace(target.conj().T @ u)) ** 2 / 4.0)


def _control(angle: float, axis: str, control_rabi: float, ideal: bool, composite: bool,
             label: str) -> List[Segment]:
    phase = AXIS_PHASE[axis]
    if composite:
        parts = build_scrofulous(angle, phase=phase).sub_pulses
        labels = [f"{label}#{k + 1}" for k in range(len(parts))]
    else:
        parts = ((angle, phase),)
        labels = [label]
    segs = []
    for (sub_angle, sub_phase), sub_label in zip(parts, labels):
        duration = 0.0 if ideal else sub_angle / (2.0 * math.pi * control_rabi)
        segs.append(Segment(CONTROL, duration, DriveParams(0.0, 0.0 if ideal else control_rabi, sub_phase),
                            sub_label, angle=sub_angle))
    return segs


def _check_common(tau: float, control_rabi: float, ideal_pulses: bool) -> None:
    if not (np.isfinite(tau) and tau > 0):
        raise ParameterDomainError(f"tau must be > 0, got {tau}")
    if not ideal_pulses and not control_rabi > 0:
        raise ParameterDomainError(f"finite pulses need control_rabi > 0, got {control_rabi}")


def build_cp2(tau: float, control_rabi: float = 10.0, ideal_pulses: bool = True,
              composite: bool = False, signal: DriveParams = SIGNAL_OFF) -> PulseSequence:
    _check_common(tau, control_rabi, ideal_pulses)
    half, pi = 0.5 * math.pi, math.pi
    segs = (_control(half, "x", control_rabi, ideal_pulses, composite, "pi/2_x")
            + [Segment(WAIT, tau / 2.0, label="wait")]
            + _control(pi, "X", control_rabi, ideal_pulses, composite, "pi_X")
            + [Segment(WINDOW, tau, signal, "signal")]
            + _control(pi, "X", control_rabi, ideal_pulses, composite, "pi_X")
            + [Segment(WAIT, tau / 2.0, label="wait")]
            + _control(half, "-x", control_rabi, ideal_pulses, composite, "pi/2_-x"))
    return _assemble(segs, tau=tau, n_pi=2, name="cp2", repetitions=1, free_evolution=2.0 * tau,
                     readout_inverted=True, composite=composite)


def build_xy8n(n: int, tau: float, control_rabi: float = 10.0, ideal_pulses: bool = True,
               composite: bool = False, signal: DriveParams = SIGNAL_OFF) -> PulseSequence:
    """XY8 block repeated n times with the signal on every second gap.

    Gaps are tau/(4n) with half gaps at both ends; windows fill the odd
    gaps, so 4n windows add up to tau and the free evolution to 2 tau.
    """
    if int(n) != n or n < 1:
        raise ParameterDomainError(f"repetitions must be an integer >= 1, got {n}")
    n = int(n)
    _check_common(tau, control_rabi, ideal_pulses)
    gap = tau / (4 * n)
    n_pi = 8 * n
    segs = _control(0.5 * math.pi, "x", control_rabi, ideal_pulses, composite, "pi/2_x")
    segs.append(Segment(WAIT, gap / 2.0, label="wait"))
    for k in range(n_pi):
        axis = XY8_PATTERN[k % 8]
        segs += _control(math.pi, axis, control_rabi, ideal_pulses, composite, f"pi_{axis}")
        if k == n_pi - 1:
            segs.append(Segment(WAIT, gap / 2.0, label="wait"))
        elif k % 2 == 0:
            segs.append(Segment(WINDOW, gap, signal, "signal"))
        else:
            segs.append(Segment(WAIT, gap, label="wait"))
    segs += _control(0.5 * math.pi, "-x", control_rabi, ideal_pulses, composite, "pi/2_-x")
    return _assemble(segs, tau=tau, n_pi=n_pi, name="xy8", repetitions=n, free_evolution=2.0 * tau,
                     readout_inverted=True, composite=composite)


def build_for_pulse_count(n_pi: int, tau: float, control_rabi: float = 10.0,
                          ideal_pulses: bool = True, composite: bool = False) -> PulseSequence:
    """CP2 for two pulses, XY8^(n_pi/8) otherwise."""
    if n_pi == 2:
        return build_cp2(tau, control_rabi, ideal_pulses, composite)
    if n_pi % 8 or n_pi < 8:
        raise ParameterDomainError(f"pulse count must be 2 or a multiple of 8, got {n_pi}")
    return build_xy8n(n_pi // 8, tau, control_rabi, ideal_pulses, composite)


def build_ramsey(tau: float, control_rabi: float = 10.0, ideal_pulses: bool = True,
                 signal: DriveParams = SIGNAL_OFF) -> PulseSequence:
    """pi/2 - signal window - pi/2, readout without phase inversion."""
    _check_common(tau, control_rabi, ideal_pulses)
    segs = (_control(0.5 * math.pi, "x", control_rabi, ideal_pulses, False, "pi/2_x")
            + [Segment(WINDOW, tau, signal, "signal")]
            + _control(0.5 * math.pi, "x", control_rabi, ideal_pulses, False, "pi/2_x"))
    return _assemble(segs, tau=tau, n_pi=0, name="ramsey", free_evolution=tau, readout_inverted=False)


def build_rabi(durations: Sequence[float], control_rabi: float) -> List[PulseSequence]:
    if not control_rabi > 0:
        raise ParameterDomainError(f"control_rabi must be > 0, got {control_rabi}")
    out = []
    for d in durations:
        if not (np.isfinite(d) and d >= 0):
            raise ParameterDomainError(f"rabi durations must be >= 0, got {d}")
        seg = Segment(CONTROL, float(d), DriveParams(0.0, control_rabi, 0.0), "drive",
                      angle=2.0 * math.pi * control_rabi * d)
        out.append(_assemble([seg], tau=float(d), n_pi=0, name="rabi", readout_inverted=False))
    return out


def _pulse_groups(seq: PulseSequence) -> List[Tuple[str, List[int]]]:
    """Consecutive control segments that make up one nominal pulse."""
    groups: List[Tuple[str, List[int]]] = []
    for i, seg in enumerate(seq.segments):
        if seg.kind != CONTROL:
            continue
        name = seg.pulse_label
        if (groups and groups[-1][0] == name and groups[-1][1][-1] == i - 1
                and "#" in seg.label and not seg.label.endswith("#1")):
            groups[-1][1].append(i)
        else:
            groups.append((name, [i]))
    return groups


def validate_sequence(seq: PulseSequence) -> SequenceDiagnostics:
    diag = SequenceDiagnostics()
    v = diag.violations
    tol = TIME_TOL * max(1.0, seq.total_duration)

    total = math.fsum(s.duration for s in seq.segments)
    if abs(total - seq.total_duration) > tol:
        v.append(f"total duration {seq.total_duration} != sum of segments {total}")

    last_end = 0.0
    for i, seg in enumerate(seq.segments):
        if seg.kind in (CONTROL, WINDOW) and seg.drive is None:
            v.append(f"segment {i} ({seg.kind}) carries no drive")
        if seg.kind == WAIT and seg.drive is not None:
            v.append(f"segment {i} (wait) carries a drive")
        if seg.start is not None:
            if seg.start < last_end - tol:
                v.append(f"overlap: segment {i} '{seg.label}' starts at {seg.start} before {last_end}")
            last_end = max(last_end, seg.end)

    if seq.name not in ("cp2", "xy8"):
        return diag

    pulses = [(name, idx) for name, idx in _pulse_groups(seq) if name.startswith("pi_")]
    if len(pulses) != seq.n_pi:
        v.append(f"pi pulse count {len(pulses)} != n_pi {seq.n_pi}")
    if seq.name == "xy8" and seq.n_pi != 8 * seq.repetitions:
        v.append(f"n_pi {seq.n_pi} != 8n for n={seq.repetitions}")

    interval = seq.pulse_interval
    for (_, a), (_, b) in zip(pulses, pulses[1:]):
        between = seq.segments[a[-1] + 1:b[0]]
        span = math.fsum(s.duration for s in between)
        if abs(span - interval) > tol:
            v.append(f"interval {span} != tau/(4n) = {interval}")
            break

    if seq.name == "xy8":
        axes = "".join(name[-1] for name, _ in pulses)
        expected = XY8_PATTERN * seq.repetitions
        if axes != expected:
            v.append(f"phase pattern {axes} != {expected}")

    if abs(seq.signal_duration - seq.tau) > tol:
        v.append(f"signal windows add up to {seq.signal_duration}, expected tau = {seq.tau}")
    free = math.fsum(s.duration for s in seq.segments if s.kind != CONTROL)
    if abs(free - 2.0 * seq.tau) > tol:
        v.append(f"free evolution {free} != 2 tau = {2.0 * seq.tau}")

    for i, seg in enumerate(seq.segments):
        if seg.kind != WINDOW:
            continue
        neighbours = seq.segments[i - 1:i] + seq.segments[i + 1:i + 2]
        if any(n.kind == WINDOW for n in neighbours):
            v.append(f"overlap: signal window {i} touches another window")
    if v:
        logging.warning(f"Sequence {seq.name} (tau={seq.tau}) failed validation: {v}")
    return diag


def export_sequence(seq: PulseSequence) -> str:
    lines = [f"# name={seq.name} tau={seq.tau!r} n_pi={seq.n_pi} repetitions={seq.repetitions} "
             f"free_evolution={seq.free_evolution!r} readout_inverted={int(seq.readout_inverted)} "
             f"composite={int(seq.composite)} total_duration={seq.total_duration!r}",
             "# kind duration_us detuning_mhz rabi_mhz phase_rad angle_rad label"]
    for s in seq.segments:
        d = s.drive
        cols = [s.kind, repr(s.duration),
                repr(d.detuning) if d else "-", repr(d.rabi) if d else "-",
                repr(d.phase) if d else "-",
                repr(s.angle) if s.angle is not None else "-", s.label or "-"]
        lines.append(" ".join(cols))
    return "\n".join(lines) + "\n"


def parse_sequence(text: str) -> PulseSequence:
    header = {}
    segs = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    k, val = token.split("=", 1)
                    header[k] = val
            continue
        kind, duration, det, rabi, phase, angle, label = line.split()
        drive = None if det == "-" else DriveParams(float(det), float(rabi), float(phase))
        segs.append(Segment(kind, float(duration), drive, "" if label == "-" else label,
                            None if angle == "-" else float(angle)))
    try:
        return _assemble(segs, tau=float(header["tau"]), n_pi=int(header["n_pi"]), name=header["name"],
                         repetitions=int(header["repetitions"]),
                         free_evolution=float(header["free_evolution"]),
                         readout_inverted=bool(int(header["readout_inverted"])),
                         composite=bool(int(header["composite"])))
    except KeyError as e:
        raise ParameterDomainError(f"sequence header lacks {e}")
