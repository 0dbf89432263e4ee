"""CSV persistence for simulated datasets.

The first line is a comment carrying the generating seed (``# seed=<int>``),
followed by a header row and one row per observation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_dataset(path, columns: dict[str, np.ndarray], seed: int) -> None:
    names = list(columns)
    data = [np.asarray(columns[c]) for c in names]
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in zip(*data):
            writer.writerow([repr(v.item()) for v in row])


def read_dataset(path) -> tuple[dict[str, np.ndarray], int]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# seed="):
        raise ValueError(f"{path}: missing '# seed=' header")
    seed = int(lines[0].split("=", 1)[1])
    reader = csv.reader(lines[1:])
    names = next(reader)
    rows = list(reader)
    cols = {}
    for j, name in enumerate(names):
        values = [r[j] for r in rows]
        if all(v.lstrip("-").isdigit() for v in values):
            cols[name] = np.array([int(v) for v in values])
        else:
            cols[name] = np.array([float(v) for v in values])
    return cols, seed
