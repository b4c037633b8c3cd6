import json
import os
import time
import logging
from typing import List, Optional


class ProgressTracker:
    """Completed sweep points of an interrupted run, kept next to its dataset.

    The file records the config hash of the run that wrote it; a tracker
    opened with a different hash treats the run as fresh.
    """

    def __init__(self, progress_file: str, run_key: Optional[str] = None):
        self.progress_file = progress_file
        self.run_key = run_key

    def save_progress(self, completed: List[str]):
        """Save completed point names to file."""
        try:
            with open(self.progress_file, 'w', encoding='utf-8') as f:
                json.dump({
                    "run_key": self.run_key,
                    "completed": list(completed),
                    "timestamp": time.strftime("%Y-%m-%d %H:%M:%S")
                }, f, indent=2)
            logging.info(f"Progress saved: {len(completed)} points completed")
        except OSError as e:
            logging.error(f"Error saving progress: {e}")

    def load_progress(self) -> List[str]:
        """Load completed point names; empty when no run was interrupted."""
        if not os.path.exists(self.progress_file):
            return []
        try:
            with open(self.progress_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, ValueError) as e:
            logging.error(f"Error loading progress: {e}")
            return []
        if data.get("run_key") != self.run_key:
            logging.warning(f"Ignoring {self.progress_file}: written by a run with a different config")
            return []
        return list(data.get("completed", []))

    def clear(self):
        if os.path.exists(self.progress_file):
            os.remove(self.progress_file)
