"""Measurement records and synthetic targets: noise, field maps, resonator response."""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.special
from scipy.optimize import brentq

from .errors import ParameterDomainError
from .signal_model import SignalTrace

MU0 = 4.0e-7 * math.pi  # T m / A
NV_TILT_DEG = 54.7


@dataclass(frozen=True)
class CameraModel:
    tau_read: float = 64.0
    counts_bright: float = 1000.0
    sigma_s: float = 0.01
    seed: int = 0
    roi_pixels: int = 1
    noise_model: str = "gaussian"

    def __post_init__(self):
        if not self.tau_read > 0:
            raise ParameterDomainError(f"tau_read must be > 0, got {self.tau_read}")
        if not self.sigma_s >= 0:
            raise ParameterDomainError(f"sigma_s must be >= 0, got {self.sigma_s}")
        if not self.counts_bright > 0:
            raise ParameterDomainError(f"counts_bright must be > 0, got {self.counts_bright}")
        if int(self.roi_pixels) != self.roi_pixels or self.roi_pixels < 1:
            raise ParameterDomainError(f"roi_pixels must be an integer >= 1, got {self.roi_pixels}")
        if self.noise_model not in ("gaussian", "poisson"):
            raise ParameterDomainError(f"unknown noise model '{self.noise_model}'")

    @property
    def effective_sigma(self) -> float:
        """Per-readout noise after averaging over the ROI pixels."""
        return self.sigma_s / math.sqrt(self.roi_pixels)


@dataclass
class FieldMap:
    values: np.ndarray
    pixel_size: float
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ParameterDomainError("field map values must be two-dimensional")
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ParameterDomainError("field map mask does not match its values")
        if np.any(self.values[self.mask] < 0):
            raise ParameterDomainError("field map values must be >= 0 on valid pixels")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def ratio(self) -> float:
        valid = self.values[self.mask]
        return float(valid.max() / valid.min())


@dataclass(frozen=True)
class AntennaGeometry:
    """Omega antenna: ring of the mean diameter plus two antiparallel leads."""

    outer_diameter: float = 250.0
    inner_diameter: float = 100.0
    current: float = 60.0  # mA
    standoff: float = 1.0
    lead_gap: float = 20.0
    lead_length: float = 500.0
    include_leads: bool = True
    nv_tilt_deg: float = NV_TILT_DEG

    @property
    def loop_radius(self) -> float:
        return 0.25 * (self.outer_diameter + self.inner_diameter)


@dataclass(frozen=True)
class FieldGrid:
    width: int = 10
    height: int = 10
    pixel_size: Optional[float] = None
    target_ratio: float = 3.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterDomainError(f"grid must have >= 1 pixel per side, got {self.width}x{self.height}")
        if self.pixel_size is not None and not self.pixel_size > 0:
            raise ParameterDomainError(f"pixel size must be > 0, got {self.pixel_size}")


@dataclass(frozen=True)
class ResonatorResponse:
    f0: float = 2370.0
    q_factor: float = 12.0
    coupling: float = 0.9
    drive_amp: float = 1.0
    ripple_depth: float = 0.0
    ripple_period: float = 40.0

    def __post_init__(self):
        if not (self.f0 > 0 and self.q_factor > 0):
            raise ParameterDomainError(f"resonator needs f0 > 0 and q > 0, got {self.f0}, {self.q_factor}")
        if not self.ripple_period > 0:
            raise ParameterDomainError(f"ripple period must be > 0, got {self.ripple_period}")


def make_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def repetitions_for(total_time: float, cycle_time_us: np.ndarray) -> int:
    cycle_s = math.fsum(cycle_time_us) * 1e-6
    return int(math.floor(total_time / cycle_s * (1.0 + 1e-12)))


def synth_noisy_trace(clean: SignalTrace, cam: CameraModel, total_time: float, index: int = 0,
                      cycle_time: Optional[np.ndarray] = None) -> SignalTrace:
    """Add readout noise for `total_time` seconds shared uniformly over the grid.

    Each repetition runs every tau point once; a point costs `cycle_time`
    us, 2 tau + tau_read unless given.
    """
    if not total_time > 0:
        raise ParameterDomainError(f"total_time must be > 0, got {total_time}")
    cycles = (2.0 * clean.tau_grid + cam.tau_read) if cycle_time is None else np.asarray(cycle_time, float)
    reps = repetitions_for(total_time, cycles)
    if reps < 1:
        raise ParameterDomainError(f"total_time {total_time} s is too short for one repetition")
    integration = reps * math.fsum(cycles) * 1e-6
    rng = make_rng(cam.seed, index)
    meta = dict(clean.meta)
    meta.update({"noise_model": cam.noise_model, "repetitions": str(reps), "seed": str(cam.seed),
                 "rng_index": str(index)})

    if cam.noise_model == "poisson":
        expected = cam.counts_bright * reps * np.clip(clean.contrast, 0.0, None)
        values = rng.poisson(expected) / (cam.counts_bright * reps)
        sigma = np.sqrt(np.clip(clean.contrast, 0.0, None) / (cam.counts_bright * reps))
    else:
        sigma = np.full(clean.contrast.shape, cam.effective_sigma / math.sqrt(reps))
        values = clean.contrast.copy()
        if cam.effective_sigma > 0:
            values += sigma * rng.standard_normal(clean.contrast.size)
    return SignalTrace(clean.tau_grid.copy(), values, sigma, integration, meta)


def loop_field(points: np.ndarray, radius: float, current: float) -> np.ndarray:
    """Field (mT) of a filamentary loop in the z=0 plane centred on the origin.

    `points` is (N, 3) in um, radius in um and current in mA. Elliptic
    integral form; points on the filament itself are not supported.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float)) * 1e-6
    a = radius * 1e-6
    z = p[:, 2]
    rho_vec = p.copy()
    rho_vec[:, 2] = 0.0
    rho = np.linalg.norm(rho_vec, axis=1)
    eps = np.finfo(float).eps
    alpha2 = a * a + rho * rho + z * z - 2.0 * a * rho
    beta2 = a * a + rho * rho + z * z + 2.0 * a * rho
    beta = np.sqrt(beta2)
    c = MU0 * current * 1e-3 / math.pi
    k2 = alpha2 / beta2
    ek = scipy.special.ellipe(1.0 - k2)
    kk = scipy.special.ellipkm1(k2)

    b_rho = np.zeros_like(rho)
    on_axis = rho <= eps * max(a, 1.0)
    off = ~on_axis
    b_rho[off] = c * z[off] * ((a * a + rho[off] ** 2 + z[off] ** 2) * ek[off] - alpha2[off] * kk[off]) \
        / (2.0 * alpha2[off] * beta[off] * rho[off])
    b_z = c * ((a * a - rho * rho - z * z) * ek + alpha2 * kk) / (2.0 * alpha2 * beta)

    unit = np.zeros_like(rho_vec)
    unit[off] = rho_vec[off] / rho[off, None]
    field_t = unit * b_rho[:, None]
    field_t[:, 2] += b_z
    return field_t * 1e3


def lead_field(points: np.ndarray, start: Sequence[float], end: Sequence[float], current: float) -> np.ndarray:
    """Field (mT) of a straight finite wire from `start` to `end` (um), current in mA."""
    p = np.atleast_2d(np.asarray(points, dtype=float)) * 1e-6
    p1 = np.asarray(start, dtype=float) * 1e-6
    p2 = np.asarray(end, dtype=float) * 1e-6
    u = (p2 - p1) / np.linalg.norm(p2 - p1)
    r1 = p - p1
    r2 = p - p2
    perp = r1 - np.outer(r1 @ u, u)
    d = np.linalg.norm(perp, axis=1)
    geometric = (r1 @ u) / np.linalg.norm(r1, axis=1) - (r2 @ u) / np.linalg.norm(r2, axis=1)
    magnitude = MU0 * current * 1e-3 / (4.0 * math.pi * d) * geometric
    direction = np.cross(u, perp) / d[:, None]
    return direction * magnitude[:, None] * 1e3


def antenna_field(points: np.ndarray, geometry: AntennaGeometry) -> np.ndarray:
    b = loop_field(points, geometry.loop_radius, geometry.current)
    if geometry.include_leads:
        x = 0.5 * geometry.lead_gap
        a = geometry.loop_radius
        y0 = -math.sqrt(max(a * a - x * x, 0.0))
        y1 = y0 - geometry.lead_length
        # feed lead carries current toward the ring, return lead away from it
        b = b + lead_field(points, (x, y1, 0.0), (x, y0, 0.0), geometry.current)
        b = b + lead_field(points, (-x, y0, 0.0), (-x, y1, 0.0), geometry.current)
    return b


def transverse_amplitude(b: np.ndarray, tilt_deg: float = NV_TILT_DEG) -> np.ndarray:
    """Component of the field perpendicular to the NV axis."""
    t = math.radians(tilt_deg)
    axis = np.array([math.sin(t), 0.0, math.cos(t)])
    along = b @ axis
    return np.linalg.norm(b - np.outer(along, axis), axis=1)


def _pixel_points(grid: FieldGrid, pixel_size: float, standoff: float) -> np.ndarray:
    xs = (np.arange(grid.width) - 0.5 * (grid.width - 1)) * pixel_size
    ys = (np.arange(grid.height) - 0.5 * (grid.height - 1)) * pixel_size
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, standoff)])


def _map_values(geometry: AntennaGeometry, grid: FieldGrid, pixel_size: float) -> np.ndarray:
    pts = _pixel_points(grid, pixel_size, geometry.standoff)
    amp = transverse_amplitude(antenna_field(pts, geometry), geometry.nv_tilt_deg)
    return amp.reshape(grid.height, grid.width)


def fit_field_of_view(geometry: AntennaGeometry, grid: FieldGrid) -> float:
    """Pixel size whose field of view spans max/min = target_ratio."""
    side = max(grid.width, grid.height)
    if side < 2:
        raise ParameterDomainError("an automatic field of view needs at least 2 pixels per side")
    a = geometry.loop_radius
    # keep the corners inside the ring, away from the filament
    upper = 0.95 * math.sqrt(2.0) * (a - 2.0 * geometry.standoff) / (side - 1)
    lower = upper * 1e-3

    def excess(pixel: float) -> float:
        values = _map_values(geometry, grid, pixel)
        return values.max() / values.min() - grid.target_ratio

    if excess(upper) < 0:
        logging.warning(f"Field of view cannot reach ratio {grid.target_ratio}; using the widest view")
        return upper
    return brentq(excess, lower, upper, xtol=1e-9)


def synth_field_map(geometry: AntennaGeometry = AntennaGeometry(), grid: FieldGrid = FieldGrid()) -> FieldMap:
    if not all(np.isfinite([geometry.current, geometry.standoff])) or geometry.loop_radius <= 0:
        raise ParameterDomainError("antenna geometry must be finite with a positive radius")
    pixel = grid.pixel_size if grid.pixel_size is not None else fit_field_of_view(geometry, grid)
    values = _map_values(geometry, grid, pixel)
    fmap = FieldMap(values, pixel)
    logging.info(f"Field map {grid.width}x{grid.height}, pixel {pixel:.4g} um, "
                 f"range {values.min():.4g}-{values.max():.4g} mT")
    return fmap


def resonator_lorentzian(r: ResonatorResponse, f_mw: np.ndarray) -> np.ndarray:
    x = 2.0 * r.q_factor * (np.asarray(f_mw, dtype=float) - r.f0) / r.f0
    return 1.0 / np.sqrt(1.0 + x * x)


def synth_resonator_amplitude(r: ResonatorResponse, f_mw: np.ndarray) -> np.ndarray:
    f = np.asarray(f_mw, dtype=float)
    if np.any(f <= 0):
        raise ParameterDomainError("microwave frequencies must be > 0")
    ripple = 1.0 + r.ripple_depth * np.cos(2.0 * math.pi * (f - r.f0) / r.ripple_period)
    return r.drive_amp * resonator_lorentzian(r, f) * ripple


def reflection_coefficient(r: ResonatorResponse, f_mw: np.ndarray) -> np.ndarray:
    """Synthetic |S11|^2 of the resonator."""
    return 1.0 - r.coupling * resonator_lorentzian(r, f_mw) ** 2


def pulse_error_map(fmap: FieldMap) -> np.ndarray:
    """Relative control-pulse error when pulses are calibrated at the median field."""
    median = np.median(fmap.values[fmap.mask])
    return fmap.values / median - 1.0
