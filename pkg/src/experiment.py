"""Dataset generation for every experiment scenario."""
import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .config import (SCHEMA_VERSION, ExperimentConfig, antenna_geometry, config_hash, field_grid, make_grid,
                     parse_config, resonator)
from .errors import DatasetError, ParameterDomainError
from .estimation import write_field_map
from .measurement import (FieldMap, pulse_error_map, reflection_coefficient, synth_field_map, synth_noisy_trace,
                          synth_resonator_amplitude)
from .progress import ProgressTracker
from .pulse_sequences import build_for_pulse_count
from .sensitivity_scan import NPI_STRIDE, REFERENCE_SLOT, TIME_STRIDE, SensitivityScanner
from .signal_model import (SignalModelParams, SignalTrace, closed_form_signal, comb_dip_spacing, lowpass_filter,
                           rabi_contrast, read_trace, simulate_trace, write_trace)
from .spin_dynamics import rabi_from_field

MANIFEST = "manifest.json"
PROGRESS = "progress.json"
TRACE_DIR = "traces"


@dataclass
class SweepPoint:
    """One sweep step: the traces it produces, their sweep values and how to make them."""

    name: str
    traces: List[Tuple[str, str]]
    sweep: Dict[str, float]
    make: Callable[[], List[SignalTrace]]


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, out_dir: Optional[str] = None, threads: int = 1,
                 fmt: str = "csv"):
        if fmt not in ("csv", "json"):
            raise ParameterDomainError(f"unknown output format '{fmt}'")
        self.config = config
        self.out_dir = out_dir or config.output_dir
        self.threads = threads
        self.fmt = fmt
        self.constants = config.constants()
        self.law = config.coherence()
        self.camera = config.camera_model()
        self.tau = config.tau_grid()
        self.progress = ProgressTracker(os.path.join(self.out_dir, PROGRESS), config.config_hash())
        self.files: List[str] = []
        self.extra: Dict[str, object] = {}

    @property
    def n_pi(self) -> int:
        proto = self.config.protocol
        return 2 if proto.sequence == "cp2" else 8 * proto.repetitions

    def t2_for(self, n_pi: int) -> float:
        return float(self.law.t2(n_pi))

    def clean_acz(self, params: SignalModelParams, n_pi: int, tau: np.ndarray, pulse_error: float = 0.0,
                  source: Optional[str] = None, phase_step: Optional[float] = None) -> np.ndarray:
        proto = self.config.protocol
        source = source or proto.signal_source
        if source == "simulation":
            seqs = [build_for_pulse_count(n_pi, float(t), proto.control_rabi, proto.ideal_pulses, proto.composite)
                    for t in tau]
            return simulate_trace(seqs, params=params, phase_grid_step=phase_step or proto.phase_step,
                                  pulse_error=proto.pulse_error + pulse_error,
                                  static_detuning=proto.static_detuning, coherence=self.law, threads=self.threads)
        return closed_form_signal(tau, params, self.config.physics.shift_mode)

    def _noisy(self, values: np.ndarray, tau: np.ndarray, index: int, meta: Dict[str, str],
               cycle_time: Optional[np.ndarray] = None) -> SignalTrace:
        clean = SignalTrace(tau.copy(), values, meta=meta)
        return synth_noisy_trace(clean, self.camera, self.config.camera.total_time, index, cycle_time)

    def _meta(self, name: str, sweep: Dict[str, float]) -> Dict[str, str]:
        meta = {"name": name, "scenario": self.config.scenario}
        meta.update({k: repr(float(v)) for k, v in sweep.items()})
        return meta

    # scenario point lists

    def amplitude_sweep_points(self) -> List[SweepPoint]:
        points = []
        n_pi = self.n_pi
        t2 = self.t2_for(n_pi)
        for i, b in enumerate(self.config.amplitude_sweep.amplitudes):
            name = f"amp_{i:02d}"
            sweep = {"b_true": b, "detuning": self.config.physics.detuning, "n_pi": n_pi}

            def make(i=i, b=b, name=name, sweep=sweep):
                params = self.config.signal_params(b_mw=b, t2=t2)
                return [self._noisy(self.clean_acz(params, n_pi, self.tau), self.tau, i, self._meta(name, sweep))]
            points.append(SweepPoint(name, [(name, "acz")], sweep, make))
        return points

    def frequency_sweep_points(self) -> List[SweepPoint]:
        fs = self.config.frequency_sweep
        f_mw = make_grid(fs.start, fs.stop, fs.points)
        if fs.constant_amplitude is not None:
            amps = np.full(f_mw.shape, fs.constant_amplitude)
        else:
            amps = synth_resonator_amplitude(resonator(fs.resonator), f_mw)
        self.extra["resonator"] = (f_mw, amps, reflection_coefficient(resonator(fs.resonator), f_mw))
        n_pi = self.n_pi
        t2 = self.t2_for(n_pi)
        points = []
        for i, (f, b) in enumerate(zip(f_mw, amps)):
            name = f"freq_{i:03d}"
            detuning = self.config.physics.f_nv - float(f)
            sweep = {"f_mw": float(f), "detuning": detuning, "b_true": float(b), "n_pi": n_pi}

            def make(i=i, b=float(b), detuning=detuning, name=name, sweep=sweep):
                params = self.config.signal_params(b_mw=b, detuning=detuning, t2=t2)
                return [self._noisy(self.clean_acz(params, n_pi, self.tau), self.tau, i, self._meta(name, sweep))]
            points.append(SweepPoint(name, [(name, "acz")], sweep, make))
        return points

    def truth_map(self) -> FieldMap:
        im = self.config.imaging
        if im.flat_field is not None:
            pixel = im.pixel_size if im.pixel_size is not None else 1.0
            return FieldMap(np.full((im.height, im.width), im.flat_field), pixel)
        return synth_field_map(antenna_geometry(im.antenna), field_grid(im))

    def imaging_points(self) -> List[SweepPoint]:
        im = self.config.imaging
        fmap = self.truth_map()
        errors = pulse_error_map(fmap) if im.pixel_pulse_errors else np.zeros_like(fmap.values)
        self.extra["field_map"] = fmap
        self.extra["pulse_errors"] = errors
        durations = np.linspace(im.rabi_start, im.rabi_stop, im.rabi_points)
        n_pi = self.n_pi
        t2 = self.t2_for(n_pi)
        points = []
        for r in range(fmap.height):
            for c in range(fmap.width):
                ordinal = r * fmap.width + c
                name = f"px_r{r:02d}_c{c:02d}"
                b = float(fmap.values[r, c])
                sweep = {"row": r, "col": c, "b_true": b, "detuning": self.config.physics.detuning,
                         "pulse_error": float(errors[r, c]), "n_pi": n_pi}
                traces = []
                if im.readout in ("acz", "both"):
                    traces.append((f"{name}_acz", "acz"))
                if im.readout in ("rabi", "both"):
                    traces.append((f"{name}_rabi", "rabi"))

                def make(ordinal=ordinal, b=b, r=r, c=c, sweep=sweep, traces=traces):
                    out = []
                    for trace_name, kind in traces:
                        meta = self._meta(trace_name, sweep)
                        if kind == "acz":
                            params = self.config.signal_params(b_mw=b, t2=t2)
                            values = self.clean_acz(params, n_pi, self.tau, float(errors[r, c]))
                            out.append(self._noisy(values, self.tau, 2 * ordinal, meta))
                        else:
                            rabi = float(rabi_from_field(b, self.constants))
                            values = rabi_contrast(durations, rabi, self.config.physics.contrast)
                            out.append(self._noisy(values, durations, 2 * ordinal + 1, meta,
                                                   durations + self.config.camera.tau_read))
                    return out
                points.append(SweepPoint(name, traces, sweep, make))
        return points

    def sensitivity_points(self) -> List[SweepPoint]:
        scanner = SensitivityScanner(self.config, self.threads)
        points = []
        for n_pi in sorted(set(self.config.sensitivity.pulse_counts)):
            name = f"npi_{n_pi:03d}"
            sweep = {"n_pi": n_pi, "t2": float(self.law.t2(n_pi)), "detuning": self.config.physics.detuning}

            def make(n_pi=n_pi, name=name, sweep=sweep):
                clean = scanner.clean_trace(n_pi)
                clean.meta = self._meta(name, sweep)
                index = n_pi * NPI_STRIDE + REFERENCE_SLOT * TIME_STRIDE
                return [synth_noisy_trace(clean, self.camera, self.config.sensitivity.reference_time, index)]
            points.append(SweepPoint(name, [(name, "acz")], sweep, make))
        return points

    def comb_points(self) -> List[SweepPoint]:
        cs = self.config.comb_study
        tau = make_grid(cs.start, cs.stop, cs.points)
        points = []
        for n_pi in cs.pulse_counts:
            name = f"comb_npi_{n_pi:03d}"
            t2 = float(self.law.t2(n_pi))
            sweep = {"n_pi": n_pi, "t2": t2, "detuning": self.config.physics.detuning}
            traces = [(f"{name}_raw", "raw"), (f"{name}_lowpass", "lowpass"), (f"{name}_closed", "closed")]

            def make(n_pi=n_pi, t2=t2, sweep=sweep, traces=traces):
                params = self.config.signal_params(t2=t2)
                raw = SignalTrace(tau.copy(), self.clean_acz(params, n_pi, tau, source="simulation",
                                                             phase_step=cs.phase_step),
                                  meta=self._meta(traces[0][0], sweep))
                window = comb_dip_spacing(n_pi, params.detuning) if cs.median and n_pi % 8 == 0 else 0.0
                low = lowpass_filter(raw, cs.cutoff, cs.filter, median_window=window,
                                     baseline_degree=cs.baseline_degree)
                low.meta["name"] = traces[1][0]
                closed = SignalTrace(tau.copy(), closed_form_signal(tau, params, "exact"),
                                     meta=self._meta(traces[2][0], sweep))
                return [raw, low, closed]
            points.append(SweepPoint(name, traces, sweep, make))
        return points

    def points(self) -> List[SweepPoint]:
        builders = {
            "amplitude-sweep": self.amplitude_sweep_points,
            "frequency-sweep": self.frequency_sweep_points,
            "imaging": self.imaging_points,
            "sensitivity-scan": self.sensitivity_points,
            "comb-study": self.comb_points,
        }
        return builders[self.config.scenario]()

    def trace_path(self, name: str) -> str:
        return os.path.join(self.out_dir, TRACE_DIR, f"{name}.{self.fmt}")

    def run(self) -> Dict:
        os.makedirs(os.path.join(self.out_dir, TRACE_DIR), exist_ok=True)
        points = self.points()
        completed = self.progress.load_progress()
        if completed:
            logging.info(f"Resuming {self.config.scenario}: {len(completed)} of {len(points)} points already done")
        entries = []
        for i, point in enumerate(points):
            done = point.name in completed and all(os.path.exists(self.trace_path(n)) for n, _ in point.traces)
            if not done:
                logging.info(f"Point {i + 1}/{len(points)}: {point.name}")
                for (trace_name, _), trace in zip(point.traces, point.make()):
                    write_trace(trace, self.trace_path(trace_name), self.fmt)
                completed.append(point.name)
                self.progress.save_progress(completed)
            for trace_name, kind in point.traces:
                entries.append({"name": trace_name, "file": os.path.relpath(self.trace_path(trace_name), self.out_dir),
                                "kind": kind, "point": point.name, "sweep": point.sweep})
        self.write_extras()
        manifest = self.manifest(entries)
        with open(os.path.join(self.out_dir, MANIFEST), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        self.progress.clear()
        logging.info(f"Dataset with {len(entries)} traces written to {self.out_dir}")
        return manifest

    def write_extras(self) -> None:
        if "resonator" in self.extra:
            f_mw, amps, s11 = self.extra["resonator"]
            path = os.path.join(self.out_dir, "resonator.csv")
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["f_mw_mhz", "b_mw_mt", "s11"])
                for row in zip(f_mw, amps, s11):
                    writer.writerow([repr(float(x)) for x in row])
            self.files.append("resonator.csv")
        if "field_map" in self.extra:
            fmap = self.extra["field_map"]
            write_field_map(fmap, os.path.join(self.out_dir, "field_map_truth.csv"))
            with open(os.path.join(self.out_dir, "pulse_errors.csv"), "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                for row in self.extra["pulse_errors"]:
                    writer.writerow([repr(float(v)) for v in row])
            self.files += ["field_map_truth.csv", "field_map_truth.json", "pulse_errors.csv"]
        if self.config.scenario == "comb-study":
            self.write_comb_summary()

    def write_comb_summary(self) -> None:
        path = os.path.join(self.out_dir, "comb_summary.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["n_pi", "rms_raw", "rms_lowpass", "reduction"])
            for n_pi in self.config.comb_study.pulse_counts:
                name = f"comb_npi_{n_pi:03d}"
                raw, low, closed = (read_trace(self.trace_path(f"{name}_{k}")) for k in ("raw", "lowpass", "closed"))
                rms_raw = float(np.sqrt(np.mean((raw.contrast - closed.contrast) ** 2)))
                rms_low = float(np.sqrt(np.mean((low.contrast - closed.contrast) ** 2)))
                reduction = rms_raw / rms_low if rms_low > 0 else math.inf
                writer.writerow([n_pi, repr(rms_raw), repr(rms_low), repr(reduction)])
                logging.info(f"Comb N_pi={n_pi}: residual rms {rms_raw:.3g} -> {rms_low:.3g} after low-pass")
        self.files.append("comb_summary.csv")

    def manifest(self, entries: List[Dict]) -> Dict:
        data = self.config.to_dict()
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "package_version": __version__,
            "scenario": self.config.scenario,
            "seed": self.config.seed,
            "format": self.fmt,
            "config": data,
            "config_hash": config_hash(data),
            "traces": entries,
            "files": sorted(self.files),
        }
        if "field_map" in self.extra:
            manifest["pixel_size_um"] = self.extra["field_map"].pixel_size
        return manifest


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None, threads: int = 1,
                   fmt: str = "csv") -> Dict:
    return ExperimentRunner(config, out_dir, threads, fmt).run()


def read_manifest(dataset_dir: str) -> Dict:
    """Load a dataset manifest and verify its config hash."""
    path = os.path.join(dataset_dir, MANIFEST)
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read manifest {path}: {e}")
    for key in ("config", "config_hash", "traces"):
        if key not in manifest:
            raise DatasetError(f"manifest {path} lacks '{key}'")
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise DatasetError(f"config hash mismatch in {path}")
    return manifest


def manifest_config(manifest: Dict) -> ExperimentConfig:
    return parse_config(dict(manifest["config"]), env={})
