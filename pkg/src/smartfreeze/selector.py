"""Per-round client selection: memory eligibility, utility scoring,
community-stratified exploitation with epsilon exploration, and the data
floor constraint."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .blocks import StageModel
from .errors import ContractError, InfeasibleStageError

DIVERSITY_FLOOR = 1e-6


@dataclass
class UtilityRecord:
    """Running utility state for one client."""

    client_id: int
    importance: float = 0.0  # summed local loss I
    time_s: float = 0.0  # stage-specific round time
    last_round: int = -1

    def util(self, lam: float) -> float:
        return self.importance - lam * self.time_s


@dataclass(frozen=True)
class SelectionConstraints:
    lam: float = 0.0
    epsilon: float = 0.1
    min_clients: int = 1  # phi: eligible-client floor per stage
    min_data: int = 0  # Gamma: minimum summed shard size in S
    cohort_size: int = 10  # |S|

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ContractError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.cohort_size < 1:
            raise ContractError("cohort size must be >= 1")


@dataclass
class SelectionResult:
    selected: list[int]
    exploited: list[int]
    explored: list[int]
    data_constraint_met: bool = True


def data_importance(x, y, stage: StageModel, batch_size: int = 256) -> float:
    """Sum of per-sample cross-entropy losses of the stage model on a shard."""
    if len(y) == 0:
        return 0.0
    total = 0.0
    for s in range(0, len(y), batch_size):
        acts = nn.forward(stage.layers, stage.params, x[s : s + batch_size])
        total += float(nn.per_sample_losses(acts[-1], y[s : s + batch_size]).sum())
    return total


def diversity(selected, omega: np.ndarray) -> float:
    """1 / sum of pairwise similarities over unordered pairs, floored so the
    value stays finite when similarities cancel."""
    ids = sorted(selected)
    if len(ids) < 2:
        raise ContractError("diversity needs at least two clients")
    total = 0.0
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            total += float(omega[ids[a], ids[b]])
    return 1.0 / max(total, DIVERSITY_FLOOR)


def eligible(capacities: dict[int, int], required_bytes: int, stage: int, min_clients: int) -> list[int]:
    """Clients whose memory covers the stage requirement; raises when fewer
    than the stage floor remain."""
    ids = sorted(cid for cid, cap in capacities.items() if cap >= required_bytes)
    if len(ids) < min_clients:
        raise InfeasibleStageError(stage, len(ids), min_clients)
    return ids


def select(
    communities,
    utilities: dict[int, UtilityRecord],
    constraints: SelectionConstraints,
    eligible_ids,
    rng: np.random.Generator,
    shard_sizes: dict[int, int] | None = None,
) -> SelectionResult:
    """Fill ceil((1-eps)|S|) exploitation slots by round-robin over
    communities (ordered by smallest member id), taking each community's
    eligible max-utility client (ties to the lower id); fill the rest
    uniformly at random.  Afterwards greedily swap in large-shard clients
    until the data floor holds, or flag the round."""
    eligible_ids = sorted(eligible_ids)
    size = constraints.cohort_size
    if len(eligible_ids) < size:
        raise ContractError(
            f"only {len(eligible_ids)} eligible clients for cohort size {size}"
        )
    lam = constraints.lam
    n_exploit = min(size, math.ceil((1.0 - constraints.epsilon) * size))
    ordered = sorted((tuple(sorted(c)) for c in communities), key=lambda c: c[0])
    eligible_set = set(eligible_ids)

    exploited: list[int] = []
    chosen: set[int] = set()
    progressed = True
    while len(exploited) < n_exploit and progressed:
        progressed = False
        for comm in ordered:
            if len(exploited) >= n_exploit:
                break
            pool = [c for c in comm if c in eligible_set and c not in chosen]
            if not pool:
                continue
            best = min(pool, key=lambda c: (-utilities[c].util(lam), c))
            exploited.append(best)
            chosen.add(best)
            progressed = True

    remaining = [c for c in eligible_ids if c not in chosen]
    n_explore = size - len(exploited)
    explored = []
    if n_explore > 0:
        picks = rng.choice(len(remaining), size=n_explore, replace=False)
        explored = [remaining[i] for i in sorted(picks)]
        chosen.update(explored)

    selected = sorted(chosen)
    ok = True
    if constraints.min_data > 0 and shard_sizes is not None:
        ok = _enforce_data_floor(selected, eligible_ids, shard_sizes, constraints.min_data)
    return SelectionResult(
        selected=sorted(selected),
        exploited=exploited,
        explored=explored,
        data_constraint_met=ok,
    )


def _enforce_data_floor(selected: list[int], eligible_ids, shard_sizes, floor: int) -> bool:
    def total():
        return sum(shard_sizes[c] for c in selected)

    outside = sorted(
        (c for c in eligible_ids if c not in selected),
        key=lambda c: (-shard_sizes[c], c),
    )
    while total() < floor and outside:
        smallest = min(selected, key=lambda c: (shard_sizes[c], c))
        candidate = outside.pop(0)
        if shard_sizes[candidate] <= shard_sizes[smallest]:
            break
        selected.remove(smallest)
        selected.append(candidate)
    return total() >= floor


def objective(
    selected,
    omega: np.ndarray,
    importances: dict[int, float],
    times: dict[int, float],
    lam: float,
) -> float:
    """Diversity + summed importance - lam * round time; used for logging and
    for the brute-force comparison oracle, never inside the selector."""
    div = diversity(selected, omega) if len(selected) >= 2 else 0.0
    imp = sum(importances[c] for c in selected)
    t = max(times[c] for c in selected) if selected else 0.0
    return div + imp - lam * t
