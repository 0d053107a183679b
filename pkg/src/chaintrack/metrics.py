"""Error metrics: orientation and position errors, batched MAE and convergence.

All angles are radians internally. Human-facing tables convert to degrees.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from . import so3


class SeriesTooShort(ValueError):
    pass


class EmptyInput(ValueError):
    pass


def orientation_error(est: np.ndarray, truth: np.ndarray) -> np.ndarray | float:
    """Angle of ``truth @ est^T``; accepts single matrices or ``(..., 3, 3)`` stacks."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    delta = truth @ np.swapaxes(est, -1, -2)
    if delta.ndim == 2:
        return so3.rotation_angle(delta)
    return so3.rotation_angle_batch(delta)


def relative_orientation(est_i: np.ndarray, est_j: np.ndarray) -> np.ndarray:
    """Orientation of frame ``j`` relative to frame ``i``: ``est_i^T @ est_j``."""
    return np.swapaxes(np.asarray(est_i, dtype=float), -1, -2) @ np.asarray(est_j, dtype=float)


def joint_position_error(est: np.ndarray, truth: np.ndarray) -> np.ndarray | float:
    err = np.linalg.norm(np.asarray(est, dtype=float) - np.asarray(truth, dtype=float), axis=-1)
    return float(err) if np.ndim(err) == 0 else err


@dataclass
class ErrorSeries:
    """Per-timestep errors of one quantity (radians or metres)."""

    t: np.ndarray
    values: np.ndarray
    label: str
    kind: Literal["orientation", "position"] = "orientation"

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.t.shape != self.values.shape:
            raise ValueError("timestamps and values must have the same length")


@dataclass
class BatchReport:
    label: str
    kind: str
    boundaries: list[tuple[float, float]]
    batch_mae: list[float]
    batch_samples: list[int]
    trial_mae: float
    drift: float
    drift_tolerance: float = 0.0

    @property
    def drifting(self) -> bool:
        return self.drift > self.drift_tolerance

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "kind": self.kind,
            "boundaries": [list(b) for b in self.boundaries],
            "batch_mae": list(self.batch_mae),
            "batch_samples": list(self.batch_samples),
            "trial_mae": self.trial_mae,
            "drift": self.drift,
            "drift_tolerance": self.drift_tolerance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> BatchReport:
        return cls(
            d["label"],
            d["kind"],
            [tuple(b) for b in d["boundaries"]],
            list(d["batch_mae"]),
            list(d["batch_samples"]),
            d["trial_mae"],
            d["drift"],
            d.get("drift_tolerance", 0.0),
        )


def batch_mae(
    series: ErrorSeries,
    batch_length: float,
    skip_initial: float = 10.0,
    drift_tolerance: float = 0.0,
) -> BatchReport:
    """Split the series after ``skip_initial`` seconds into equal batches.

    The batch count is the evaluated length divided by ``batch_length``,
    rounded to the nearest integer, so the batches always partition the
    evaluated interval. ``drift`` is last-batch MAE minus first-batch MAE.
    """
    if not batch_length > 0:
        raise ValueError("batch_length must be positive")
    t, v = series.t, series.values
    if len(t) == 0:
        raise SeriesTooShort(f"{series.label}: empty series")
    start = t[0] + skip_initial
    mask = t >= start - 1e-9
    t_eval, v_eval = t[mask], v[mask]
    if len(t_eval) == 0:
        raise SeriesTooShort(f"{series.label}: nothing left after skipping {skip_initial} s")
    dt = np.median(np.diff(t)) if len(t) > 1 else 0.0
    length = t_eval[-1] - t_eval[0] + dt
    if length < batch_length - 1e-6:
        raise SeriesTooShort(
            f"{series.label}: {length:.3f} s after the skip is shorter than one "
            f"{batch_length} s batch"
        )
    count = max(1, int(np.floor(length / batch_length + 0.5)))
    edges = t_eval[0] + length * np.arange(count + 1) / count
    idx = np.searchsorted(t_eval, edges[1:-1] - 1e-9)
    chunks = np.split(v_eval, idx)
    maes = [float(np.mean(c)) for c in chunks]
    return BatchReport(
        series.label,
        series.kind,
        [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])],
        maes,
        [len(c) for c in chunks],
        float(np.mean(v_eval)),
        maes[-1] - maes[0],
        drift_tolerance,
    )


def convergence_time(series: ErrorSeries, threshold: float = 0.02, hold: float = 2.0) -> float | None:
    """First time (relative to the series start) after which the error stays
    below ``threshold`` for at least ``hold`` seconds; ``None`` if never."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    t, below = series.t, series.values < threshold
    if len(t) == 0:
        return None
    # run boundaries of the boolean mask
    padded = np.concatenate(([False], below, [False])).astype(np.int8)
    change = np.diff(padded)
    starts = np.flatnonzero(change == 1)
    ends = np.flatnonzero(change == -1) - 1
    for s, e in zip(starts, ends):
        if t[e] - t[s] >= hold - 1e-9:
            return float(t[s] - t[0])
    return None


@dataclass
class AggregateRow:
    label: str
    kind: str
    median: float
    std: float
    trials: int
    batch_median: list[float] = field(default_factory=list)

    @property
    def drift(self) -> float:
        return self.batch_median[-1] - self.batch_median[0] if self.batch_median else 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "kind": self.kind,
            "median": self.median,
            "std": self.std,
            "trials": self.trials,
            "batch_median": list(self.batch_median),
            "drift": self.drift,
        }


def aggregate_trials(reports: Iterable[BatchReport]) -> dict[str, AggregateRow]:
    """Median and (population) standard deviation of per-trial MAEs per label.

    Batch medians are only reported when every trial has the same batch count.
    """
    groups: dict[str, list[BatchReport]] = defaultdict(list)
    for rep in reports:
        groups[rep.label].append(rep)
    if not groups:
        raise EmptyInput("no trial reports to aggregate")
    out = {}
    for label in groups:
        reps = groups[label]
        maes = np.sort([r.trial_mae for r in reps])
        counts = {len(r.batch_mae) for r in reps}
        batch_median = []
        if len(counts) == 1:
            stacked = np.sort([r.batch_mae for r in reps], axis=0)
            batch_median = [float(x) for x in np.median(stacked, axis=0)]
        out[label] = AggregateRow(
            label, reps[0].kind, float(np.median(maes)), float(np.std(maes)), len(reps), batch_median
        )
    return out
