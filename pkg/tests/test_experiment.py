import csv
import json
import os

import numpy as np
import pytest

from src.analysis import fit_dataset
from src.config import load_config, parse_config
from src.database import FitDatabase
from src.errors import DatasetError
from src.estimation import read_field_map
from src.experiment import MANIFEST, PROGRESS, ExperimentRunner, read_manifest, run_experiment
from src.progress import ProgressTracker
from src.signal_model import read_trace

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def make_config(data, **sections):
    data = json.loads(json.dumps(data))
    for key, value in sections.items():
        data[key] = value
    return parse_config(data, env={})


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_amplitude_sweep_dataset(base_config, tmp_path):
    manifest = run_experiment(make_config(base_config), str(tmp_path / "ds"))
    assert [t["name"] for t in manifest["traces"]] == [f"amp_{i:02d}" for i in range(5)]
    assert manifest["scenario"] == "amplitude-sweep"
    assert manifest["traces"][2]["sweep"]["b_true"] == 0.4
    trace = read_trace(str(tmp_path / "ds" / manifest["traces"][0]["file"]))
    assert len(trace) == 40
    assert trace.meta["seed"] == "11"
    assert not (tmp_path / "ds" / PROGRESS).exists()


def test_datasets_are_reproducible(base_config, tmp_path):
    cfg = make_config(base_config)
    run_experiment(cfg, str(tmp_path / "a"))
    run_experiment(cfg, str(tmp_path / "b"), threads=3)
    names = sorted(os.listdir(tmp_path / "a" / "traces"))
    assert names == sorted(os.listdir(tmp_path / "b" / "traces"))
    for name in names:
        assert read_bytes(tmp_path / "a" / "traces" / name) == read_bytes(tmp_path / "b" / "traces" / name)
    assert read_bytes(tmp_path / "a" / MANIFEST) == read_bytes(tmp_path / "b" / MANIFEST)


def test_seed_changes_the_noise(base_config, tmp_path):
    run_experiment(make_config(base_config), str(tmp_path / "a"))
    run_experiment(make_config(base_config, seed=12), str(tmp_path / "b"))
    a = read_trace(str(tmp_path / "a" / "traces" / "amp_00.csv"))
    b = read_trace(str(tmp_path / "b" / "traces" / "amp_00.csv"))
    assert not np.array_equal(a.contrast, b.contrast)


def test_manifest_hash_is_verified(base_config, tmp_path):
    ds = tmp_path / "ds"
    run_experiment(make_config(base_config), str(ds))
    assert read_manifest(str(ds))["config"]["seed"] == 11
    with open(ds / MANIFEST, encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["config"]["seed"] = 99
    with open(ds / MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with pytest.raises(DatasetError):
        read_manifest(str(ds))
    with pytest.raises(DatasetError):
        read_manifest(str(tmp_path / "nowhere"))


def test_interrupted_run_resumes(base_config, tmp_path):
    ds = tmp_path / "ds"
    cfg = make_config(base_config)
    run_experiment(cfg, str(ds))
    reference = read_bytes(ds / "traces" / "amp_01.csv")
    (ds / "traces" / "amp_00.csv").write_text("kept", encoding="utf-8")
    os.remove(ds / "traces" / "amp_01.csv")
    ProgressTracker(str(ds / PROGRESS), cfg.config_hash()).save_progress(["amp_00", "amp_01"])

    manifest = ExperimentRunner(cfg, str(ds)).run()
    assert (ds / "traces" / "amp_00.csv").read_text(encoding="utf-8") == "kept"
    assert read_bytes(ds / "traces" / "amp_01.csv") == reference
    assert len(manifest["traces"]) == 5
    assert not (ds / PROGRESS).exists()


def test_unknown_format(base_config):
    with pytest.raises(ValueError):
        ExperimentRunner(make_config(base_config), fmt="xml")


def test_fit_amplitude_sweep(base_config, tmp_path):
    ds = str(tmp_path / "ds")
    run_experiment(make_config(base_config, fit={"fix_t2": True, "fix_contrast": True}), ds, fmt="json")
    summary = fit_dataset(ds)
    assert summary.failed == []
    for row in summary.rows:
        assert row["converged"]
        assert row["b_mw"] == pytest.approx(row["b_true"], rel=1e-2)
    assert FitDatabase(os.path.join(ds, "fits.db")).get_fit_count() == 5
    assert os.path.exists(os.path.join(ds, "fits", "amp_03.txt"))
    with open(os.path.join(ds, "quadratic_law.txt"), encoding="utf-8") as f:
        report = dict(line.split(" = ") for line in f.read().splitlines())
    # gamma_e^2 / 2 over 2 * 140 MHz
    assert float(report["a_mhz_per_mt2"]) == pytest.approx(28.02495 ** 2 / 2 / 280.0, rel=1e-2)
    assert float(report["r_squared"]) > 0.999


def test_corrupt_trace_fails_alone(base_config, tmp_path):
    ds = tmp_path / "ds"
    run_experiment(make_config(base_config, fit={"fix_t2": True, "fix_contrast": True}), str(ds))
    (ds / "traces" / "amp_02.csv").write_text("tau_us,contrast\n1,2\n", encoding="utf-8")
    summary = fit_dataset(str(ds), str(tmp_path / "report"))
    assert summary.failed == ["amp_02"]
    assert sum(1 for row in summary.rows if row.get("converged")) == 4
    assert os.path.exists(tmp_path / "report" / "quadratic_law.txt")
    with open(tmp_path / "report" / "fit_summary.csv", encoding="utf-8") as f:
        assert len(list(csv.reader(f))) == 6


def test_frequency_sweep(base_config, tmp_path):
    ds = str(tmp_path / "ds")
    cfg = make_config(base_config, scenario="frequency-sweep", fit={"fix_t2": True, "fix_contrast": True},
                      frequency_sweep={"start": 2300.0, "stop": 2500.0, "points": 3})
    manifest = run_experiment(cfg, ds)
    assert "resonator.csv" in manifest["files"]
    assert [t["sweep"]["detuning"] for t in manifest["traces"]] == [260.0, 160.0, 60.0]
    fit_dataset(ds)
    with open(os.path.join(ds, "frequency_response.csv"), encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    for row in rows:
        assert row["ok"] == "true"
        assert float(row["b_mw_mt"]) == pytest.approx(float(row["b_true_mt"]), rel=1e-2)


def test_flat_field_imaging(base_config, tmp_path):
    ds = str(tmp_path / "ds")
    cfg = make_config(base_config, scenario="imaging", fit={"fix_t2": True, "fix_contrast": True},
                      imaging={"width": 2, "height": 2, "pixel_size": 2.0, "flat_field": 0.3919})
    manifest = run_experiment(cfg, ds)
    assert len(manifest["traces"]) == 8
    assert manifest["pixel_size_um"] == 2.0
    assert {"field_map_truth.csv", "pulse_errors.csv"} <= set(manifest["files"])
    summary = fit_dataset(ds)
    assert summary.failed == []
    for kind in ("acz", "rabi"):
        fmap = read_field_map(os.path.join(ds, f"{kind}_map.csv"))
        assert fmap.mask.all()
        assert fmap.pixel_size == 2.0
        assert fmap.values == pytest.approx(np.full((2, 2), 0.3919), rel=1e-2)
        with open(os.path.join(ds, f"{kind}_map.json"), encoding="utf-8") as f:
            assert json.load(f)["rms_rel_error_vs_truth"] < 1e-2


def test_sensitivity_dataset(base_config, tmp_path):
    cfg = make_config(base_config, scenario="sensitivity-scan",
                      sensitivity={"pulse_counts": [2, 16], "grid_points": 200})
    manifest = run_experiment(cfg, str(tmp_path / "ds"))
    assert [t["name"] for t in manifest["traces"]] == ["npi_002", "npi_016"]
    assert manifest["traces"][1]["sweep"]["t2"] == pytest.approx(3.2 * 8 ** 0.41)


def test_comb_study(base_config, tmp_path):
    ds = tmp_path / "ds"
    cfg = make_config(base_config, scenario="comb-study",
                      comb_study={"pulse_counts": [8], "start": 0.05, "stop": 2.0, "points": 200,
                                  "cutoff": 1.0, "phase_step": 0.1})
    manifest = run_experiment(cfg, str(ds))
    assert [t["kind"] for t in manifest["traces"]] == ["raw", "lowpass", "closed"]
    with open(ds / "comb_summary.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["n_pi"] == "8"
    assert float(rows[0]["rms_raw"]) >= 0.0


@pytest.mark.slow
def test_shipped_comb_study_reaches_fivefold_reduction(tmp_path):
    cfg = load_config(os.path.join(REPO_ROOT, "comb_study_config.json"), env={})
    ds = tmp_path / "ds"
    run_experiment(cfg, str(ds))
    with open(ds / "comb_summary.csv", encoding="utf-8") as f:
        rows = {int(r["n_pi"]): float(r["reduction"]) for r in csv.DictReader(f)}
    assert sorted(rows) == [32, 64]
    assert all(reduction >= 5.0 for reduction in rows.values())


@pytest.mark.slow
def test_shipped_amplitude_sweep_follows_quadratic_law(tmp_path):
    cfg = load_config(os.path.join(REPO_ROOT, "amplitude_sweep_config.json"), env={})
    ds = str(tmp_path / "ds")
    run_experiment(cfg, ds)
    summary = fit_dataset(ds)
    assert summary.failed == []
    with open(os.path.join(ds, "quadratic_law.txt"), encoding="utf-8") as f:
        report = dict(line.split(" = ") for line in f.read().splitlines())
    assert float(report["a_mhz_per_mt2"]) == pytest.approx(1.4001, rel=1e-2)
    assert float(report["r_squared"]) > 0.9999
    assert float(report["max_rel_deviation"]) < 0.02
    assert int(report["points"]) == 5


def test_shipped_frequency_sweep_tracks_resonator(tmp_path):
    cfg = load_config(os.path.join(REPO_ROOT, "frequency_sweep_config.json"), env={})
    ds = str(tmp_path / "ds")
    run_experiment(cfg, ds)
    fit_dataset(ds)
    with open(os.path.join(ds, "frequency_response.csv"), encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 31
    assert all(row["ok"] == "true" for row in rows)
    b_fit = np.array([float(row["b_mw_mt"]) for row in rows])
    b_true = np.array([float(row["b_true_mt"]) for row in rows])
    assert np.sqrt(np.mean(((b_fit - b_true) / b_true) ** 2)) < 0.02
    # shift relative to the constant-drive 1/detuning curve is the resonator profile squared
    ratio = {float(row["f_mw_mhz"]): float(row["f_acz_mhz"]) / float(row["f_acz_constant_mhz"]) for row in rows}
    assert ratio[2370.0] == pytest.approx(1.0, rel=2e-2)
    assert max(ratio, key=ratio.get) == 2370.0
    assert ratio[2200.0] < 0.5 and ratio[2500.0] < 0.5
    for row in rows:
        assert ratio[float(row["f_mw_mhz"])] == pytest.approx(float(row["b_true_mt"]) ** 2, rel=2e-2)
