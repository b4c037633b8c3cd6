import sqlite3
import logging
import math
from typing import Dict, List, Optional

FIT_COLUMNS = ("name", "kind", "frequency", "frequency_err", "t2", "contrast", "offset",
               "residual_variance", "b_mw", "b_err", "converged", "message")


class FitDatabase:
    def __init__(self, db_file: str):
        self.db_file = db_file
        self.init_database()

    def init_database(self):
        """Initialize SQLite database with the fits table."""
        conn = sqlite3.connect(self.db_file)
        try:
            c = conn.cursor()
            c.execute('''CREATE TABLE IF NOT EXISTS fits
                        (name TEXT PRIMARY KEY,
                         kind TEXT,
                         frequency REAL,
                         frequency_err REAL,
                         t2 REAL,
                         contrast REAL,
                         offset REAL,
                         residual_variance REAL,
                         b_mw REAL,
                         b_err REAL,
                         converged INTEGER,
                         message TEXT)''')
            conn.commit()
        except sqlite3.Error as e:
            logging.error(f"Database initialization error: {e}")
            raise
        finally:
            conn.close()

    def save_fits(self, rows: List[Dict]):
        """Save fit rows in a single transaction, replacing rows of the same name."""
        if not rows:
            return

        conn = sqlite3.connect(self.db_file)
        try:
            c = conn.cursor()
            c.executemany(f'''INSERT OR REPLACE INTO fits ({", ".join(FIT_COLUMNS)})
                             VALUES ({", ".join("?" for _ in FIT_COLUMNS)})''',
                          [tuple(_cell(row.get(col)) for col in FIT_COLUMNS) for row in rows])
            conn.commit()
            logging.info(f"Database update: saved {len(rows)} fits")
        except sqlite3.Error as e:
            logging.error(f"Database save error: {e}")
            raise
        finally:
            conn.close()

    def get_fit_count(self) -> int:
        conn = sqlite3.connect(self.db_file)
        try:
            c = conn.cursor()
            c.execute('SELECT COUNT(*) FROM fits')
            return c.fetchone()[0]
        finally:
            conn.close()

    def get_fit(self, name: str) -> Optional[Dict]:
        conn = sqlite3.connect(self.db_file)
        try:
            c = conn.cursor()
            c.execute(f'SELECT {", ".join(FIT_COLUMNS)} FROM fits WHERE name = ?', (name,))
            row = c.fetchone()
            return dict(zip(FIT_COLUMNS, row)) if row else None
        finally:
            conn.close()


def _cell(value):
    # sqlite has no NaN; store it as NULL
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, bool):
        return int(value)
    return value
