import json
import os

import pytest

from src.measurement import CameraModel
from src.signal_model import SignalModelParams
from src.spin_dynamics import PhysicalConstants


@pytest.fixture
def constants():
    return PhysicalConstants()


@pytest.fixture
def nv_params():
    """CP2 working point: 0.39 mT at 140 MHz detuning."""
    return SignalModelParams(omega=7.76, detuning=140.0, t2=3.2, contrast=0.05)


@pytest.fixture
def camera():
    return CameraModel(tau_read=64.0, sigma_s=1.9, roi_pixels=100, seed=7)


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict to a JSON file and return its path."""
    def _write(data, name="config.json"):
        path = os.path.join(tmp_path, name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        return path
    return _write


@pytest.fixture
def base_config(tmp_path):
    return {
        "schema_version": 1,
        "scenario": "amplitude-sweep",
        "seed": 11,
        "output_dir": os.path.join(str(tmp_path), "out"),
        "physics": {"detuning": 140.0, "t2": 3.2, "contrast": 0.05},
        "protocol": {"sequence": "cp2", "signal_source": "closed_form"},
        "grid": {"start": 0.2, "stop": 8.0, "points": 40},
        "camera": {"tau_read": 64.0, "sigma_s": 0.01, "total_time": 288.0},
        "amplitude_sweep": {"amplitudes": [0.2, 0.3, 0.4, 0.5, 0.6]},
    }
