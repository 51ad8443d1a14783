"""Evaluation utilities and the deterministic metrics log.

The metrics CSV is append-only, schema-versioned, and a pure function of
the run seed; wall-clock timings live in a separate sidecar file so the
deterministic artifact stays bit-identical across reruns.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from ..errors import ContractError
from ..rng import Rng

METRICS_SCHEMA = "vidflow-metrics v1"


def w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein between 1D samples via the sorted coupling."""
    a, b = np.sort(np.asarray(a, dtype=np.float64)), np.sort(np.asarray(b, dtype=np.float64))
    if len(a) != len(b):
        qs = np.linspace(0, 1, max(len(a), len(b)), endpoint=True)
        a = np.quantile(a, qs)
        b = np.quantile(b, qs)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def eval_w2(samples_a: np.ndarray, samples_b: np.ndarray,
            n_directions: int = 64, seed: int = 0) -> float:
    """Exact W2 in 1D; sliced (seeded random directions) above that."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[0] == 1 and a.shape[1] > 1 and np.asarray(samples_a).ndim == 1:
        a = a.T
    if b.shape[0] == 1 and b.shape[1] > 1 and np.asarray(samples_b).ndim == 1:
        b = b.T
    if a.size == 0 or b.size == 0:
        raise ContractError("eval_w2: sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"eval_w2: dims differ {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] == 1:
        return w2_1d(a[:, 0], b[:, 0])
    dirs = Rng(seed, ("sliced-w2",)).normal((n_directions, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sq = [w2_1d(a @ d, b @ d) ** 2 for d in dirs]
    return float(np.sqrt(np.mean(sq)))


def gsb_ratio(good: float, same: float, bad: float) -> float:
    """(G + S) / (B + S) preference ratio from pairwise comparisons."""
    if good < 0 or same < 0 or bad < 0:
        raise ContractError("gsb_ratio: counts must be nonnegative")
    if same + bad == 0:
        raise ContractError("gsb_ratio: S + B must be positive")
    return (good + same) / (bad + same)


class MetricsWriter:
    """Append-only CSV with a schema header and stable float formatting."""

    def __init__(self, path, fields: list[str]):
        self.path = Path(path)
        self.fields = ["step"] + [f for f in fields if f != "step"]
        self._last_step = None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            fh.write(f"# {METRICS_SCHEMA}\n")
            csv.writer(fh).writerow(self.fields)

    def add(self, step: int, **values):
        if self._last_step is not None and step < self._last_step:
            raise ContractError(f"metrics must append monotonically: {step} after "
                                f"{self._last_step}")
        self._last_step = step
        row = [str(step)]
        for name in self.fields[1:]:
            v = values.get(name, "")
            row.append(f"{v:.10g}" if isinstance(v, float) else str(v))
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != f"# {METRICS_SCHEMA}":
            raise ContractError(f"unexpected metrics schema line: {header!r}")
        return list(csv.DictReader(fh))


class RunTimer:
    """Wall-clock sidecar; intentionally outside the deterministic CSV."""

    def __init__(self, path):
        self.path = Path(path)
        self.t0 = time.monotonic()
        self.marks: dict[str, float] = {}

    def mark(self, name: str):
        self.marks[name] = time.monotonic() - self.t0

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.marks, indent=2, sort_keys=True))
