"""CSV metrics sink shared by every experiment."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

COLUMNS = ("experiment", "algo", "seed", "resolution", "step", "reward_queries", "wallclock_s",
           "mean_reward", "std_reward")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsSink:
    """Appends rows to a CSV, flushing after each one.

    The header is written only when the file is new or empty. Reopening an
    existing file with a different header is an error.
    """

    def __init__(self, path: str | Path, experiment: str = "", algo: str = "", seed: int = 0,
                 resolution: int = 0):
        self.path = Path(path)
        self.fixed = dict(experiment=experiment, algo=algo, seed=seed, resolution=resolution)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        if not fresh:
            with open(self.path, newline="") as fh:
                header = next(csv.reader(fh), None)
            if tuple(header or ()) != COLUMNS:
                raise ValueError(f"{self.path}: existing header {header} does not match schema")
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(COLUMNS)
            self._fh.flush()

    def write(self, row: dict, **fixed) -> None:
        full = {**self.fixed, **fixed, **row}
        missing = [c for c in COLUMNS if c not in full]
        if missing:
            raise KeyError(f"metrics row lacks {missing}")
        self._w.writerow([_cell(full[c]) for c in COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rows(path: str | Path) -> list[dict]:
    """Rows as dicts of strings; see :func:`vaderlab.harness.plot.parse_csv` for typed reads."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def merge_shards(shards: Iterable[str | Path], dest: str | Path) -> Path:
    """Concatenate shard CSVs (in the given order) under one header."""
    dest = Path(dest)
    tmp = dest.with_suffix(dest.suffix + ".tmp")
    with open(tmp, "w", newline="") as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(COLUMNS)
        for shard in shards:
            with open(shard, newline="") as fh:
                r = csv.reader(fh)
                header = next(r, None)
                if tuple(header or ()) != COLUMNS:
                    raise ValueError(f"{shard}: unexpected header {header}")
                w.writerows(r)
    tmp.replace(dest)
    return dest
