import csv
import logging
import math
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ExperimentConfig
from .errors import ParameterDomainError
from .estimation import _map_parallel, amplitude_from_shift, fit_acz_trace, format_report
from .measurement import CameraModel, synth_noisy_trace
from .pulse_sequences import build_for_pulse_count
from .sensitivity import (EtaFit, SensitivityReport, detuning_scan, eta_best, fit_eta, fit_pulse_scaling,
                          jacobian_b, sigma_b, t2_scaling)
from .signal_model import SignalModelParams, SignalTrace, closed_form_signal, simulate_trace
from .spin_dynamics import rabi_from_field

# rng index layout: pulse count, integration time, trial
NPI_STRIDE = 1_000_000
TIME_STRIDE = 1_000
REFERENCE_SLOT = 999


class SensitivityScanner:
    """Runs the pulse-count sensitivity pipeline and the detuning scan for one config."""

    def __init__(self, config: ExperimentConfig, threads: int = 1):
        if config.sensitivity is None:
            raise ParameterDomainError("sensitivity section is required")
        self.config = config
        self.settings = config.sensitivity
        self.threads = threads
        self.constants = config.constants()
        self.law = config.coherence()
        self.camera: CameraModel = config.camera_model()
        self.tau = config.tau_grid()

    def clean_trace(self, n_pi: int) -> SignalTrace:
        t2 = float(self.law.t2(n_pi))
        params = self.config.signal_params(t2=t2)
        proto = self.config.protocol
        if proto.signal_source == "simulation":
            seqs = [build_for_pulse_count(n_pi, float(t), proto.control_rabi, proto.ideal_pulses, proto.composite)
                    for t in self.tau]
            values = simulate_trace(seqs, params=params, phase_grid_step=proto.phase_step,
                                    pulse_error=proto.pulse_error, static_detuning=proto.static_detuning,
                                    coherence=self.law, threads=self.threads)
        else:
            values = closed_form_signal(self.tau, params, self.config.physics.shift_mode)
        return SignalTrace(self.tau.copy(), values, meta={"n_pi": str(n_pi), "t2_us": repr(t2)})

    def _fit_variance(self, clean: SignalTrace, total_time: float, index: int, t2: float) -> Tuple[float, object]:
        noisy = synth_noisy_trace(clean, self.camera, total_time, index)
        fit = fit_acz_trace(noisy, {"t2": t2})
        if not fit.converged:
            logging.warning(f"Sensitivity fit at index {index} did not converge: {fit.message}")
        return fit.residual_variance, fit

    def _jacobian(self, fit, t2: float) -> np.ndarray:
        b_fit = float(amplitude_from_shift(fit.frequency, self.config.physics.detuning, self.constants,
                                           self.config.physics.shift_mode))
        contrast = float(np.clip(fit.params["contrast"], 1e-9, 1.0))
        p = SignalModelParams(float(rabi_from_field(b_fit, self.constants)), self.config.physics.detuning, t2,
                              contrast, self.config.physics.f_nv)
        return jacobian_b(self.tau, p, self.constants)

    def sigma_b_curve(self, n_pi: int) -> Tuple[List[Tuple[float, float]], EtaFit]:
        """sigma_B against integration time for one pulse count, and its eta fit."""
        t2 = float(self.law.t2(n_pi))
        clean = self.clean_trace(n_pi)
        base = n_pi * NPI_STRIDE
        ref_var, ref_fit = self._fit_variance(clean, self.settings.reference_time,
                                              base + REFERENCE_SLOT * TIME_STRIDE, t2)
        jac = self._jacobian(ref_fit, t2)
        samples = []
        for i, total in enumerate(self.settings.integration_times):
            if self.settings.variance_source == "reference":
                variance = ref_var * self.settings.reference_time / total
            else:
                runs = [self._fit_variance(clean, total, base + i * TIME_STRIDE + k, t2)[0]
                        for k in range(self.settings.trials)]
                variance = float(np.mean(runs))
            samples.append((float(total), sigma_b(variance, jac)))
        eta = fit_eta(samples)
        logging.info(f"N_pi={n_pi}: T2={t2:.4g} us, eta={eta.eta * 1e3:.4g} uT/sqrt(Hz), sigma0={eta.sigma0:.3g} mT")
        return samples, eta

    def run(self) -> SensitivityReport:
        s = self.settings
        report = SensitivityReport()
        counts = sorted(set(s.pulse_counts))
        results = _map_parallel(self.sigma_b_curve, counts, self.threads)
        for n_pi, (samples, eta) in zip(counts, results):
            report.sigma_b_samples[n_pi] = samples
            report.t2[n_pi] = float(self.law.t2(n_pi))
            report.eta[n_pi] = eta.eta
            report.sigma0[n_pi] = eta.sigma0

        if len(counts) >= 3:
            report.p = fit_pulse_scaling([(n, report.eta[n]) for n in counts])
            logging.info(f"Pulse scaling exponent p = {report.p:.3f}")
        else:
            logging.info(f"Only {len(counts)} pulse count(s); skipping pulse scaling")
        if len(counts) >= 2:
            report.s_t2 = t2_scaling([(n, report.t2[n]) for n in counts])

        scan_t2 = float(self.law.t2(s.scan_pulse_count))
        report.detuning_scan = detuning_scan(s.detunings, s.scan_b_mw, self.camera, scan_t2,
                                             self.config.physics.contrast, self.constants, s.grid_points)
        headline = self.headline_row(report.detuning_scan)
        report.eta_best, report.tau_star = headline[1], headline[2]
        logging.info(f"Headline eta_best at {headline[0]:g} MHz: {headline[1] * 1e3:.4g} uT/sqrt(Hz)")

        demo_t2 = float(self.law.t2(s.demo_pulse_count))
        demo_params = SignalModelParams(float(rabi_from_field(s.demo_b_mw, self.constants)), s.demo_detuning,
                                        demo_t2, self.config.physics.contrast)
        demo = eta_best(demo_params, self.camera, self.constants, grid=s.grid_points)
        report.demo = {"detuning_mhz": s.demo_detuning, "b_mw_mt": s.demo_b_mw, "n_pi": float(s.demo_pulse_count),
                       "eta_best_ut_per_sqrt_hz": demo.ut_per_sqrt_hz, "tau_star_us": demo.tau_star,
                       "reference_ut_per_sqrt_hz": s.demo_reference}
        report.assumptions = self.assumptions()
        report.assumptions["headline_detuning_mhz"] = headline[0]
        return report

    def headline_row(self, scan: List[Tuple[float, float, float]]) -> Tuple[float, float, float]:
        """Row of the detuning scan reported as eta_best.

        sensitivity.headline_detuning picks the row; left unset, the largest
        scanned detuning is used, where the linear-response reading of the
        shift holds best. physics.detuning is the fitting working point and is
        usually not part of the scan.
        """
        target = self.settings.headline_detuning
        if target is None:
            return max(scan, key=lambda row: row[0])
        for row in scan:
            if math.isclose(row[0], target):
                return row
        raise ParameterDomainError(f"headline detuning {target} MHz is not in the detuning scan")

    def assumptions(self) -> Dict[str, object]:
        ph, cam = self.config.physics, self.config.camera
        return {
            "contrast": ph.contrast,
            "sigma_s": cam.sigma_s,
            "roi_pixels": cam.roi_pixels,
            "sigma_eff": self.camera.effective_sigma,
            "tau_read_us": cam.tau_read,
            "t2_ref_us": self.law.t2_ref,
            "t2_ref_npi": self.law.n_ref,
            "t2_exponent": self.law.exponent,
            "detuning_mhz": ph.detuning,
            "b_mw_mt": ph.b_mw,
            "shift_mode": ph.shift_mode,
            "clean_source": self.config.protocol.signal_source,
            "variance_source": self.settings.variance_source,
            "reference_time_s": self.settings.reference_time,
            "scan_b_mw_mt": self.settings.scan_b_mw,
            "scan_pulse_count": self.settings.scan_pulse_count,
        }


def report_record(report: SensitivityReport) -> Dict[str, object]:
    record: Dict[str, object] = {}
    for n_pi in sorted(report.eta):
        record[f"eta_npi_{n_pi}_ut_per_sqrt_hz"] = report.eta[n_pi] * 1e3
    record["p"] = report.p if report.p is not None else "n/a"
    record["s_t2"] = report.s_t2 if report.s_t2 is not None else "n/a"
    if report.eta_best is not None:
        record["eta_best_ut_per_sqrt_hz"] = report.eta_best * 1e3
        record["tau_star_us"] = report.tau_star
    for key, value in report.demo.items():
        record[f"demo_{key}"] = value
    for key, value in report.assumptions.items():
        record[f"assumption_{key}"] = value
    return record


def _write_rows(path: str, header: List[str], rows: List[List[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def write_sensitivity_report(report: SensitivityReport, out_dir: str) -> List[str]:
    """Key-value report plus the sigma_B(T), eta(N_pi) and eta_best(detuning) tables."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, name) for name in
             ("sensitivity_report.txt", "sigma_b.csv", "eta_vs_npi.csv", "eta_best_vs_detuning.csv")]
    with open(paths[0], "w", encoding="utf-8") as f:
        f.write(format_report(report_record(report)))
    _write_rows(paths[1], ["n_pi", "integration_time_s", "sigma_b_mt"],
                [[n, t, sb] for n in sorted(report.sigma_b_samples) for t, sb in report.sigma_b_samples[n]])
    _write_rows(paths[2], ["n_pi", "t2_us", "eta_ut_per_sqrt_hz", "sigma0_mt"],
                [[n, report.t2.get(n, math.nan), report.eta[n] * 1e3, report.sigma0.get(n, 0.0)]
                 for n in sorted(report.eta)])
    _write_rows(paths[3], ["detuning_mhz", "eta_best_ut_per_sqrt_hz", "tau_star_us"],
                [[d, e * 1e3, t] for d, e, t in report.detuning_scan])
    logging.info(f"Sensitivity report written to {out_dir}")
    return paths


def run_sensitivity(config: ExperimentConfig, out_dir: Optional[str] = None, threads: int = 1) -> SensitivityReport:
    report = SensitivityScanner(config, threads).run()
    write_sensitivity_report(report, out_dir or config.output_dir)
    return report
