"""Fits every trace of a dataset and writes the per-scenario summaries."""
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .database import FIT_COLUMNS, FitDatabase
from .errors import DatasetError, ParameterDomainError
from .estimation import (_map_parallel, amplitude_error, amplitude_from_shift, field_map_from_pixels, fit_acz_trace,
                         fit_rabi_trace, format_report, frequency_response, quadratic_law, read_field_map,
                         write_field_map)
from .experiment import manifest_config, read_manifest
from .signal_model import read_trace
from .spin_dynamics import field_from_rabi, rabi_from_field

SUMMARY_COLUMNS = FIT_COLUMNS + ("b_true",)


@dataclass
class AnalysisSummary:
    rows: List[Dict] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)


class DatasetAnalyzer:
    def __init__(self, dataset_dir: str, out_dir: Optional[str] = None, threads: int = 1):
        self.dataset_dir = dataset_dir
        self.out_dir = out_dir or dataset_dir
        self.threads = threads
        self.manifest = read_manifest(dataset_dir)
        self.config = manifest_config(self.manifest)
        self.constants = self.config.constants()
        self.law = self.config.coherence()

    def fixed_for(self, entry: Dict) -> Dict[str, float]:
        fixed = {}
        if self.config.fit.fix_contrast:
            fixed["contrast"] = self.config.physics.contrast
        if self.config.fit.fix_t2 and entry["kind"] != "rabi":
            fixed["t2"] = float(self.law.t2(entry["sweep"].get("n_pi", self.config.physics.t2_ref_npi)))
        return fixed

    def fit_entry(self, entry: Dict) -> Dict:
        name, kind, sweep = entry["name"], entry["kind"], entry["sweep"]
        row = {"name": name, "kind": kind, "b_true": sweep.get("b_true", math.nan), "converged": False}
        try:
            trace = read_trace(os.path.join(self.dataset_dir, entry["file"]))
            if kind == "rabi":
                fit = fit_rabi_trace(trace, self.fixed_for(entry), multistart=self.config.fit.multistart)
                b_mw = float(field_from_rabi(fit.frequency, self.constants))
                b_err = float(field_from_rabi(fit.frequency_err, self.constants))
            else:
                fit = fit_acz_trace(trace, self.fixed_for(entry), multistart=self.config.fit.multistart)
                detuning = float(sweep.get("detuning", self.config.physics.detuning))
                mode = self.config.physics.shift_mode
                b_mw = float(amplitude_from_shift(fit.frequency, detuning, self.constants, mode))
                b_err = amplitude_error(b_mw, fit.frequency, fit.frequency_err, detuning, mode)
        except (DatasetError, ParameterDomainError, ValueError, np.linalg.LinAlgError) as e:
            logging.error(f"Trace {name} failed: {e}")
            row["message"] = str(e)
            return row
        row.update({"frequency": fit.frequency, "frequency_err": fit.frequency_err, "t2": fit.params["t2"],
                    "contrast": fit.params["contrast"], "offset": fit.params["offset"],
                    "residual_variance": fit.residual_variance, "b_mw": b_mw, "b_err": b_err,
                    "converged": fit.converged, "message": fit.message})
        record = {"name": name, "kind": kind}
        record.update(fit.as_record())
        record.update({"b_mw": b_mw, "b_err": b_err})
        path = os.path.join(self.out_dir, "fits", f"{name}.txt")
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_report(record))
        return row

    def run(self) -> AnalysisSummary:
        os.makedirs(os.path.join(self.out_dir, "fits"), exist_ok=True)
        entries = self.manifest["traces"]
        logging.info(f"Fitting {len(entries)} traces of {self.config.scenario} dataset {self.dataset_dir}")
        summary = AnalysisSummary()
        summary.rows = _map_parallel(self.fit_entry, entries, self.threads)
        summary.failed = [row["name"] for row in summary.rows if "frequency" not in row]
        summary.outputs.append(self.write_summary(summary.rows))
        FitDatabase(os.path.join(self.out_dir, "fits.db")).save_fits(summary.rows)
        summary.outputs.append(os.path.join(self.out_dir, "fits.db"))

        scenario = self.config.scenario
        try:
            if scenario == "amplitude-sweep":
                summary.outputs.append(self.write_quadratic_law(summary.rows))
            elif scenario == "frequency-sweep":
                summary.outputs.append(self.write_frequency_response(entries))
            elif scenario == "imaging":
                summary.outputs += self.write_maps(summary.rows, entries)
        except (DatasetError, ParameterDomainError) as e:
            logging.error(f"Scenario summary for {scenario} failed: {e}")
            summary.failed.append(f"{scenario}-summary")
        logging.info(f"Fitted {len(summary.rows) - len(summary.failed)}/{len(summary.rows)} traces")
        return summary

    def write_summary(self, rows: List[Dict]) -> str:
        path = os.path.join(self.out_dir, "fit_summary.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(SUMMARY_COLUMNS)
            for row in rows:
                writer.writerow([_cell(row.get(col, "")) for col in SUMMARY_COLUMNS])
        return path

    def write_quadratic_law(self, rows: List[Dict]) -> str:
        ok = [row for row in rows if row.get("converged")]
        law = quadratic_law([row["b_true"] for row in ok], [row["frequency"] for row in ok])
        path = os.path.join(self.out_dir, "quadratic_law.txt")
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_report({"a_mhz_per_mt2": law.a, "r_squared": law.r_squared,
                                   "max_rel_deviation": law.max_rel_deviation, "points": len(ok)}))
        logging.info(f"Quadratic law: a={law.a:.5g} MHz/mT^2, R^2={law.r_squared:.6f}")
        return path

    def write_frequency_response(self, entries: List[Dict]) -> str:
        readable, f_mw, b_true = [], [], []
        for entry in entries:
            try:
                readable.append(read_trace(os.path.join(self.dataset_dir, entry["file"])))
            except DatasetError:
                continue
            f_mw.append(entry["sweep"]["f_mw"])
            b_true.append(entry["sweep"]["b_true"])
        fs = self.config.frequency_sweep
        drive = fs.constant_amplitude if fs.constant_amplitude is not None else fs.resonator.drive_amp
        rabi_ref = float(rabi_from_field(drive, self.constants))
        points = frequency_response(readable, f_mw, self.config.physics.f_nv, self.constants,
                                    self.config.physics.shift_mode, self.fixed_for({"kind": "acz", "sweep": {}}),
                                    self.threads)
        path = os.path.join(self.out_dir, "frequency_response.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["f_mw_mhz", "detuning_mhz", "f_acz_mhz", "f_acz_err_mhz", "f_acz_constant_mhz",
                             "b_mw_mt", "b_err_mt", "b_true_mt", "ok"])
            for point, b in zip(points, b_true):
                constant = rabi_ref ** 2 / (2.0 * point.detuning)
                writer.writerow([_cell(v) for v in (point.f_mw, point.detuning, point.f_acz, point.f_acz_err,
                                                    constant, point.b_mw, point.b_err, b, point.ok)])
        return path

    def write_maps(self, rows: List[Dict], entries: List[Dict]) -> List[str]:
        im = self.config.imaging
        pixel = float(self.manifest.get("pixel_size_um", im.pixel_size or 1.0))
        by_name = {row["name"]: row for row in rows}
        truth_path = os.path.join(self.dataset_dir, "field_map_truth.csv")
        truth = read_field_map(truth_path) if os.path.exists(truth_path) else None
        outputs = []
        for kind in ("acz", "rabi"):
            pixels = [(int(e["sweep"]["row"]), int(e["sweep"]["col"]),
                       by_name[e["name"]]["b_mw"] if by_name[e["name"]].get("converged") else math.nan)
                      for e in entries if e["kind"] == kind]
            if not pixels:
                continue
            try:
                fmap = field_map_from_pixels(pixels, im.height, im.width, pixel)
            except DatasetError as e:
                logging.error(f"No {kind} map: {e}")
                continue
            extra = {"readout": kind}
            if truth is not None:
                valid = fmap.mask & truth.mask
                rel = (fmap.values[valid] - truth.values[valid]) / truth.values[valid]
                extra["rms_rel_error_vs_truth"] = float(np.sqrt(np.mean(rel ** 2)))
            outputs.append(write_field_map(fmap, os.path.join(self.out_dir, f"{kind}_map.csv"), extra))
        return outputs


def _cell(value):
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return value


def fit_dataset(dataset_dir: str, out_dir: Optional[str] = None, threads: int = 1) -> AnalysisSummary:
    return DatasetAnalyzer(dataset_dir, out_dir, threads).run()
