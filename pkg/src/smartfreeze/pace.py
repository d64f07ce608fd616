"""Freeze-decision logic driven by parameter-update history.

Per round the controller snapshots the aggregated block parameters, computes
the block perturbation (norm of the summed last-Q updates over the sum of
their norms), smooths it with a sliding window, fits a least-squares slope
over the smoothed tail, and freezes once the slope stays within the
threshold for a streak of rounds.

A flat perturbation curve alone cannot distinguish convergence from steady
full-rate training (aligned updates give P = 1 with zero slope in both
cases), so the streak only advances while the recent mean update norm has
also decayed below ``decay_ratio`` times its historical peak.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def block_perturbation(snapshots, Q: int) -> float:
    """||sum of the last Q updates|| / sum of their norms, in [0, 1].

    ``snapshots`` holds at least Q+1 equal-length parameter vectors, oldest
    first.  Returns 0 when every recent update is exactly zero.
    """
    snaps = list(snapshots)[-(Q + 1) :]
    if len(snaps) < Q + 1:
        raise ContractError(f"need {Q + 1} snapshots, have {len(snaps)}")
    length = len(snaps[0])
    if any(len(s) != length for s in snaps):
        raise ContractError("snapshot vectors differ in length")
    updates = [np.asarray(b) - np.asarray(a) for a, b in zip(snaps[:-1], snaps[1:])]
    denom = sum(float(np.linalg.norm(u)) for u in updates)
    if denom == 0.0:
        return 0.0
    total = np.sum(updates, axis=0)
    return float(np.linalg.norm(total)) / denom


def smooth(series, H: int, r: int) -> float:
    """Sliding-window mean: last H values once r >= H, else the full prefix.

    ``r`` is the 1-based round count, i.e. len(series) at the time of the call.
    """
    series = list(series)
    if not series:
        raise ContractError("cannot smooth an empty series")
    if r >= H:
        window = series[-H:]
    else:
        window = series[:r]
    return float(np.mean(window))


def fit_slope(points) -> float:
    """Ordinary least-squares slope of y over x = 0..K-1."""
    y = np.asarray(points, dtype=np.float64)
    if y.size < 2:
        raise ContractError("slope fit needs at least 2 points")
    x = np.arange(y.size, dtype=np.float64)
    xm = x - x.mean()
    return float(np.dot(xm, y - y.mean()) / np.dot(xm, xm))


@dataclass
class PaceRecord:
    round: int
    perturbation: float | None
    smoothed: float | None
    slope: float | None
    freeze: bool


@dataclass
class PaceController:
    """Per-block convergence monitor; call :meth:`observe` once per round with
    the aggregated block parameter vector."""

    Q: int = 5
    H: int = 5
    threshold: float = 1e-3  # slope magnitude bound
    patience: int = 3  # consecutive rounds below threshold required
    decay_ratio: float = 0.5  # update-norm decay required before freezing
    snapshots: deque = field(default_factory=deque)
    p_series: list = field(default_factory=list)
    smoothed_series: list = field(default_factory=list)
    slope_series: list = field(default_factory=list)
    norm_series: list = field(default_factory=list)
    below_count: int = 0
    peak_norm: float = 0.0

    def __post_init__(self):
        self.snapshots = deque(self.snapshots, maxlen=self.Q + 1)

    def observe(self, block_params: np.ndarray) -> PaceRecord:
        self.snapshots.append(np.array(block_params, dtype=np.float64, copy=True))
        r = len(self.p_series) + 1
        if len(self.snapshots) < self.Q + 1:
            return PaceRecord(round=r, perturbation=None, smoothed=None, slope=None, freeze=False)
        p = block_perturbation(self.snapshots, self.Q)
        self.p_series.append(p)
        update = self.snapshots[-1] - self.snapshots[-2]
        self.norm_series.append(float(np.linalg.norm(update)))
        sm = smooth(self.p_series, self.H, len(self.p_series))
        self.smoothed_series.append(sm)
        if len(self.smoothed_series) < 2:
            return PaceRecord(round=r, perturbation=p, smoothed=sm, slope=None, freeze=False)
        slope = fit_slope(self.smoothed_series[-max(self.H, 2) :])
        self.slope_series.append(slope)
        freeze = self._decide(slope)
        return PaceRecord(round=r, perturbation=p, smoothed=sm, slope=slope, freeze=freeze)

    def _norms_decayed(self) -> bool:
        recent = float(np.mean(self.norm_series[-self.H :]))
        self.peak_norm = max(self.peak_norm, recent)
        return recent <= self.decay_ratio * self.peak_norm

    def _decide(self, slope: float) -> bool:
        if abs(slope) <= self.threshold and self._norms_decayed():
            self.below_count += 1
        else:
            self.below_count = 0
        if self.below_count >= self.patience:
            self.below_count = 0
            return True
        return False
