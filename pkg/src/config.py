"""JSON experiment configuration.

Keys starting with "_comment" are ignored. Unknown keys, wrong types and
out-of-range values are collected and raised together as ConfigError.
Environment variables ACZ_<SECTION>__<KEY>=<json> override file values.
"""
import dataclasses
import hashlib
import json
import logging
import math
import os
import typing
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .coherence import CoherenceLaw
from .errors import ConfigError
from .measurement import AntennaGeometry, CameraModel, FieldGrid, ResonatorResponse
from .signal_model import SignalModelParams
from .spin_dynamics import NV_RABI_FACTOR, TWO_LEVEL_RABI_FACTOR, PhysicalConstants, rabi_from_field

SCHEMA_VERSION = 1
ENV_PREFIX = "ACZ_"
SCENARIOS = ("amplitude-sweep", "frequency-sweep", "imaging", "sensitivity-scan", "comb-study")
SCENARIO_SECTION = {
    "amplitude-sweep": "amplitude_sweep",
    "frequency-sweep": "frequency_sweep",
    "imaging": "imaging",
    "sensitivity-scan": "sensitivity",
    "comb-study": "comb_study",
}
RABI_FACTORS = {"nv": NV_RABI_FACTOR, "two-level": TWO_LEVEL_RABI_FACTOR}


@dataclass
class PhysicsConfig:
    gamma_e: float = 28.02495
    rabi_factor: str = "nv"
    detuning: float = 140.0
    b_mw: float = 0.3919
    t2: Optional[float] = 3.2
    contrast: float = 0.05
    f_nv: float = 2560.0
    shift_mode: str = "approx"
    approx_guard: float = 5.0
    t2_exponent: float = 0.41
    t2_ref_npi: int = 2


@dataclass
class ProtocolConfig:
    sequence: str = "cp2"
    repetitions: int = 1
    ideal_pulses: bool = True
    control_rabi: float = 10.0
    composite: bool = False
    phase_step: float = 0.01
    signal_source: str = "closed_form"
    pulse_error: float = 0.0
    static_detuning: float = 0.0


@dataclass
class GridConfig:
    start: float = 0.2
    stop: float = 8.0
    points: int = 40
    spacing: str = "linear"


@dataclass
class CameraConfig:
    tau_read: float = 64.0
    counts_bright: float = 1000.0
    sigma_s: float = 0.01
    roi_pixels: int = 1
    noise_model: str = "gaussian"
    total_time: float = 288.0


@dataclass
class FitConfig:
    fix_t2: bool = False
    fix_contrast: bool = False
    multistart: bool = True


@dataclass
class AmplitudeSweepConfig:
    amplitudes: List[float] = field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5, 0.6])


@dataclass
class ResonatorConfig:
    f0: float = 2370.0
    q_factor: float = 12.0
    coupling: float = 0.9
    drive_amp: float = 1.0
    ripple_depth: float = 0.0
    ripple_period: float = 40.0


@dataclass
class FrequencySweepConfig:
    start: float = 2200.0
    stop: float = 2500.0
    points: int = 31
    resonator: ResonatorConfig = field(default_factory=ResonatorConfig)
    constant_amplitude: Optional[float] = None


@dataclass
class AntennaConfig:
    outer_diameter: float = 250.0
    inner_diameter: float = 100.0
    current: float = 60.0
    standoff: float = 1.0
    lead_gap: float = 20.0
    lead_length: float = 500.0
    include_leads: bool = True


@dataclass
class ImagingConfig:
    width: int = 10
    height: int = 10
    pixel_size: Optional[float] = None
    target_ratio: float = 3.0
    antenna: AntennaConfig = field(default_factory=AntennaConfig)
    flat_field: Optional[float] = None
    readout: str = "both"
    rabi_start: float = 0.0
    rabi_stop: float = 0.5
    rabi_points: int = 41
    pixel_pulse_errors: bool = True


@dataclass
class SensitivityConfig:
    pulse_counts: List[int] = field(default_factory=lambda: [2, 8, 16, 32, 64])
    integration_times: List[float] = field(default_factory=lambda: [10.0, 31.6, 100.0, 316.0])
    trials: int = 20
    variance_source: str = "reference"
    reference_time: float = 3600.0
    detunings: List[float] = field(default_factory=lambda: [200.0, 500.0, 1000.0, 2000.0, 3000.0, 5000.0])
    headline_detuning: Optional[float] = None
    scan_b_mw: float = 0.75
    scan_pulse_count: int = 64
    grid_points: int = 2000
    demo_detuning: float = 4.0
    demo_b_mw: float = 0.025
    demo_pulse_count: int = 2
    demo_reference: float = 11.8


@dataclass
class CombConfig:
    pulse_counts: List[int] = field(default_factory=lambda: [32, 64])
    start: float = 0.05
    stop: float = 2.0
    points: int = 2800
    cutoff: float = 1.0
    filter: str = "fft"
    phase_step: float = 0.05
    median: bool = True
    baseline_degree: int = 4


@dataclass
class ExperimentConfig:
    schema_version: int
    scenario: str
    seed: int
    output_dir: str = "output"
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    amplitude_sweep: Optional[AmplitudeSweepConfig] = None
    frequency_sweep: Optional[FrequencySweepConfig] = None
    imaging: Optional[ImagingConfig] = None
    sensitivity: Optional[SensitivityConfig] = None
    comb_study: Optional[CombConfig] = None

    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(self.physics.gamma_e, RABI_FACTORS[self.physics.rabi_factor])

    def coherence(self) -> CoherenceLaw:
        t2_ref = self.physics.t2 if self.physics.t2 is not None else 3.2
        return CoherenceLaw(t2_ref, self.physics.t2_ref_npi, self.physics.t2_exponent)

    def signal_params(self, b_mw: Optional[float] = None, detuning: Optional[float] = None,
                      t2: Optional[float] = None) -> SignalModelParams:
        b = self.physics.b_mw if b_mw is None else b_mw
        return SignalModelParams(float(rabi_from_field(b, self.constants())),
                                 self.physics.detuning if detuning is None else detuning,
                                 self.physics.t2 if t2 is None else t2,
                                 self.physics.contrast, self.physics.f_nv)

    def camera_model(self, seed_offset: int = 0) -> CameraModel:
        c = self.camera
        return CameraModel(c.tau_read, c.counts_bright, c.sigma_s, self.seed + seed_offset, c.roi_pixels,
                           c.noise_model)

    def tau_grid(self) -> np.ndarray:
        return make_grid(self.grid.start, self.grid.stop, self.grid.points, self.grid.spacing)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def make_grid(start: float, stop: float, points: int, spacing: str = "linear") -> np.ndarray:
    if spacing == "log":
        return np.geomspace(start, stop, points)
    return np.linspace(start, stop, points)


def antenna_geometry(cfg: AntennaConfig) -> AntennaGeometry:
    return AntennaGeometry(cfg.outer_diameter, cfg.inner_diameter, cfg.current, cfg.standoff, cfg.lead_gap,
                           cfg.lead_length, cfg.include_leads)


def field_grid(cfg: ImagingConfig) -> FieldGrid:
    return FieldGrid(cfg.width, cfg.height, cfg.pixel_size, cfg.target_ratio)


def resonator(cfg: ResonatorConfig) -> ResonatorResponse:
    return ResonatorResponse(cfg.f0, cfg.q_factor, cfg.coupling, cfg.drive_amp, cfg.ripple_depth,
                             cfg.ripple_period)


def config_hash(data: Mapping) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def strip_comments(data):
    if isinstance(data, dict):
        return {k: strip_comments(v) for k, v in data.items() if not k.startswith("_comment")}
    if isinstance(data, list):
        return [strip_comments(v) for v in data]
    return data


def apply_env_overrides(data: Dict, env: Mapping[str, str]) -> List[str]:
    """Apply ACZ_ variables in place; returns the dotted keys overridden."""
    applied = []
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        raw = env[name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for key in path[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                break
        else:
            node[path[-1]] = value
            applied.append(".".join(path))
    return applied


def _type_ok(value, tp) -> bool:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        return any(_type_ok(value, arg) for arg in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if origin in (list, List):
        (item,) = typing.get_args(tp)
        return isinstance(value, list) and all(_type_ok(v, item) for v in value)
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    return False


def _dataclass_of(tp):
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def _build(cls, data, where: str, issues: List[str]):
    if not isinstance(data, dict):
        issues.append(f"{where or 'config'}: expected an object")
        return None
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            issues.append(f"{where + '.' if where else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = f"{where}.{f.name}" if where else f.name
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if f.name not in data:
            if required:
                issues.append(f"{path}: required key missing")
            continue
        value = data[f.name]
        sub = _dataclass_of(hints[f.name])
        if sub is not None and value is not None:
            built = _build(sub, value, path, issues)
            if built is not None:
                kwargs[f.name] = built
            continue
        if not _type_ok(value, hints[f.name]):
            issues.append(f"{path}: invalid type {type(value).__name__}")
            continue
        if hints[f.name] is float or float in typing.get_args(hints[f.name]):
            value = float(value) if isinstance(value, int) else value
        if isinstance(value, list) and value and float in typing.get_args(hints[f.name]):
            value = [float(v) for v in value]
        kwargs[f.name] = value
    if any(i.startswith(where) for i in issues) and where:
        return None
    try:
        return cls(**kwargs)
    except TypeError as e:
        issues.append(f"{where or 'config'}: {e}")
        return None


def _check(issues: List[str], ok: bool, path: str, message: str) -> None:
    if not ok:
        issues.append(f"{path}: {message}")


def validate_config(cfg: ExperimentConfig) -> List[str]:
    issues: List[str] = []
    _check(issues, cfg.schema_version == SCHEMA_VERSION, "schema_version",
           f"unsupported version {cfg.schema_version}, expected {SCHEMA_VERSION}")
    _check(issues, cfg.scenario in SCENARIOS, "scenario", f"must be one of {', '.join(SCENARIOS)}")
    _check(issues, cfg.seed >= 0, "seed", "must be >= 0")

    ph = cfg.physics
    _check(issues, ph.gamma_e > 0, "physics.gamma_e", "must be > 0")
    _check(issues, ph.rabi_factor in RABI_FACTORS, "physics.rabi_factor", "must be 'nv' or 'two-level'")
    _check(issues, math.isfinite(ph.detuning) and ph.detuning != 0, "physics.detuning", "must be finite and non-zero")
    _check(issues, ph.b_mw >= 0, "physics.b_mw", "must be >= 0")
    _check(issues, ph.t2 is None or ph.t2 > 0, "physics.t2", "must be > 0 or null")
    _check(issues, 0 < ph.contrast <= 1, "physics.contrast", "must lie in (0, 1]")
    _check(issues, ph.shift_mode in ("approx", "exact"), "physics.shift_mode", "must be 'approx' or 'exact'")
    _check(issues, ph.shift_mode == "exact" or ph.detuning > 0, "physics.detuning",
           "approx shift mode needs a positive detuning")
    _check(issues, ph.t2_ref_npi > 0, "physics.t2_ref_npi", "must be > 0")

    pr = cfg.protocol
    _check(issues, pr.sequence in ("cp2", "xy8"), "protocol.sequence", "must be 'cp2' or 'xy8'")
    _check(issues, pr.repetitions >= 1, "protocol.repetitions", "must be >= 1")
    _check(issues, pr.ideal_pulses or pr.control_rabi > 0, "protocol.control_rabi", "must be > 0")
    _check(issues, 0 < pr.phase_step <= 0.1, "protocol.phase_step", "must lie in (0, 0.1]")
    _check(issues, pr.signal_source in ("closed_form", "simulation"), "protocol.signal_source",
           "must be 'closed_form' or 'simulation'")

    g = cfg.grid
    _check(issues, g.start > 0, "grid.start", "must be > 0")
    _check(issues, g.stop > g.start, "grid.stop", "must exceed grid.start")
    _check(issues, g.points >= 5, "grid.points", "must be >= 5")
    _check(issues, g.spacing in ("linear", "log"), "grid.spacing", "must be 'linear' or 'log'")

    c = cfg.camera
    _check(issues, c.tau_read > 0, "camera.tau_read", "must be > 0")
    _check(issues, c.counts_bright > 0, "camera.counts_bright", "must be > 0")
    _check(issues, c.sigma_s >= 0, "camera.sigma_s", "must be >= 0")
    _check(issues, c.roi_pixels >= 1, "camera.roi_pixels", "must be >= 1")
    _check(issues, c.noise_model in ("gaussian", "poisson"), "camera.noise_model", "must be 'gaussian' or 'poisson'")
    _check(issues, c.total_time > 0, "camera.total_time", "must be > 0")

    section = SCENARIO_SECTION.get(cfg.scenario)
    if section and getattr(cfg, section) is None:
        issues.append(f"{section}: required for scenario '{cfg.scenario}'")

    if cfg.amplitude_sweep is not None:
        amps = cfg.amplitude_sweep.amplitudes
        _check(issues, len(amps) > 0 and all(a > 0 for a in amps), "amplitude_sweep.amplitudes",
               "must be a non-empty list of positive amplitudes")
    if cfg.frequency_sweep is not None:
        fs = cfg.frequency_sweep
        _check(issues, 0 < fs.start < fs.stop, "frequency_sweep.stop", "must exceed a positive start")
        _check(issues, fs.points >= 2, "frequency_sweep.points", "must be >= 2")
        _check(issues, ph.shift_mode == "exact" or fs.stop < ph.f_nv, "frequency_sweep.stop",
               "must stay below physics.f_nv")
        _check(issues, fs.resonator.f0 > 0 and fs.resonator.q_factor > 0, "frequency_sweep.resonator",
               "needs f0 > 0 and q_factor > 0")
    if cfg.imaging is not None:
        im = cfg.imaging
        _check(issues, im.width >= 1 and im.height >= 1, "imaging.width", "grid needs >= 1 pixel per side")
        _check(issues, im.pixel_size is None or im.pixel_size > 0, "imaging.pixel_size", "must be > 0 or null")
        _check(issues, im.target_ratio > 1, "imaging.target_ratio", "must be > 1")
        _check(issues, im.readout in ("acz", "rabi", "both"), "imaging.readout", "must be 'acz', 'rabi' or 'both'")
        _check(issues, im.rabi_points >= 5 and im.rabi_stop > im.rabi_start >= 0, "imaging.rabi_points",
               "rabi grid needs >= 5 points over a positive span")
    if cfg.sensitivity is not None:
        s = cfg.sensitivity
        _check(issues, all(n == 2 or (n >= 8 and n % 8 == 0) for n in s.pulse_counts) and s.pulse_counts,
               "sensitivity.pulse_counts", "must be 2 or multiples of 8")
        times = s.integration_times
        _check(issues, len(times) >= 3 and min(times) > 0 and max(times) / min(times) >= 10,
               "sensitivity.integration_times", "need >= 3 positive values spanning a decade")
        _check(issues, s.trials >= 1, "sensitivity.trials", "must be >= 1")
        _check(issues, s.variance_source in ("reference", "per_run"), "sensitivity.variance_source",
               "must be 'reference' or 'per_run'")
        _check(issues, s.grid_points >= 100, "sensitivity.grid_points", "must be >= 100")
        _check(issues, all(d > 0 for d in s.detunings), "sensitivity.detunings", "must be positive")
        _check(issues, s.headline_detuning is None or any(math.isclose(s.headline_detuning, d) for d in s.detunings),
               "sensitivity.headline_detuning", "must be one of sensitivity.detunings")
    if cfg.comb_study is not None:
        cs = cfg.comb_study
        _check(issues, all(n == 2 or (n >= 8 and n % 8 == 0) for n in cs.pulse_counts) and cs.pulse_counts,
               "comb_study.pulse_counts", "must be 2 or multiples of 8")
        _check(issues, 0 < cs.start < cs.stop and cs.points >= 8, "comb_study.points",
               "dense grid needs >= 8 points over a positive span")
        _check(issues, 0 < cs.phase_step <= 0.1, "comb_study.phase_step", "must lie in (0, 0.1]")
        _check(issues, cs.filter in ("fft", "fir"), "comb_study.filter", "must be 'fft' or 'fir'")
        _check(issues, 0 <= cs.baseline_degree <= 8, "comb_study.baseline_degree", "must lie in [0, 8]")
        if cs.points >= 2 and cs.stop > cs.start:
            nyquist = 0.5 * (cs.points - 1) / (cs.stop - cs.start)
            _check(issues, 0 < cs.cutoff < nyquist, "comb_study.cutoff", f"must lie below Nyquist {nyquist:.4g} MHz")
    return issues


def parse_config(data: Dict, env: Optional[Mapping[str, str]] = None,
                 seed: Optional[int] = None) -> ExperimentConfig:
    data = strip_comments(data)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", where="config")
    applied = apply_env_overrides(data, env if env is not None else os.environ)
    if applied:
        logging.info(f"Environment overrides applied: {', '.join(applied)}")
    if seed is not None:
        data["seed"] = seed
    issues: List[str] = []
    cfg = _build(ExperimentConfig, data, "", issues)
    if cfg is not None and not issues:
        issues = validate_config(cfg)
    if issues:
        raise ConfigError(issues)
    return cfg


def load_config(path: str, env: Optional[Mapping[str, str]] = None, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", where=path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}: {e.msg}", where=path)
    cfg = parse_config(data, env, seed)
    logging.info(f"Loaded {cfg.scenario} config from {path} (hash {cfg.config_hash()[:12]})")
    return cfg
