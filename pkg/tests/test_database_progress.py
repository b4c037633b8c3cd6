import math

from src.database import FitDatabase
from src.progress import ProgressTracker


def test_fits_are_saved_and_replaced(tmp_path):
    db = FitDatabase(str(tmp_path / "fits.db"))
    db.save_fits([
        {"name": "amp_00", "kind": "acz", "frequency": 0.2, "b_mw": 0.39, "converged": True},
        {"name": "amp_01", "kind": "acz", "frequency": math.nan, "converged": False, "message": "bad"},
    ])
    assert db.get_fit_count() == 2
    row = db.get_fit("amp_00")
    assert row["frequency"] == 0.2
    assert row["converged"] == 1
    assert row["t2"] is None
    assert db.get_fit("amp_01")["frequency"] is None

    db.save_fits([{"name": "amp_00", "kind": "acz", "frequency": 0.25, "converged": True}])
    assert db.get_fit_count() == 2
    assert db.get_fit("amp_00")["frequency"] == 0.25
    assert db.get_fit("missing") is None


def test_empty_save_is_a_no_op(tmp_path):
    db = FitDatabase(str(tmp_path / "fits.db"))
    db.save_fits([])
    assert db.get_fit_count() == 0


def test_progress_round_trip(tmp_path):
    tracker = ProgressTracker(str(tmp_path / "progress.json"))
    assert tracker.load_progress() == []
    tracker.save_progress(["amp_00", "amp_01"])
    assert tracker.load_progress() == ["amp_00", "amp_01"]
    tracker.clear()
    assert tracker.load_progress() == []
    tracker.clear()


def test_unreadable_progress_starts_over(tmp_path):
    path = tmp_path / "progress.json"
    path.write_text("{", encoding="utf-8")
    assert ProgressTracker(str(path)).load_progress() == []


def test_progress_from_another_config_is_ignored(tmp_path):
    path = str(tmp_path / "progress.json")
    ProgressTracker(path, "hash-a").save_progress(["amp_00"])
    assert ProgressTracker(path, "hash-b").load_progress() == []
    assert ProgressTracker(path, "hash-a").load_progress() == ["amp_00"]
