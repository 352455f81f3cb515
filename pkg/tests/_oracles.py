"""Independent reference implementations used to check the library.

These are deliberately written with different algorithms and data layouts
than the package code so that agreement is meaningful.
"""
from __future__ import annotations

import math
import statistics

import numpy as np

from flowshift.catalog import CandidateModel


def pareto_oracle(candidates: list[CandidateModel]) -> list[CandidateModel]:
    """O(n^2) pairwise dominance via numpy broadcasting.

    Dominated: some other point has cost <= and accuracy >= with at least
    one strict. Identical (cost, accuracy) duplicates collapse to the
    smallest feature count, then the smallest mask value.
    """
    cost = np.array([c.cost for c in candidates], dtype=np.float64)
    acc = np.array([c.accuracy for c in candidates], dtype=np.float64)
    le = cost[:, None] >= cost[None, :]      # [i, j]: j no costlier than i
    ge = acc[:, None] <= acc[None, :]        # [i, j]: j no less accurate
    strict = (cost[:, None] > cost[None, :]) | (acc[:, None] < acc[None, :])
    dominated = (le & ge & strict).any(axis=1)

    best: dict[tuple, CandidateModel] = {}
    for i, c in enumerate(candidates):
        if dominated[i]:
            continue
        k = (c.cost, c.accuracy)
        prev = best.get(k)
        if prev is None:
            best[k] = c
            continue
        cand_rank = (c.feature_mask.bit_count(), c.feature_mask)
        prev_rank = (prev.feature_mask.bit_count(), prev.feature_mask)
        if cand_rank < prev_rank:
            best[k] = c
    return sorted(best.values(), key=lambda c: c.cost)


def step_interpreter(k_max: int, mon_window: float, dec_factor: float,
                     drops: list[int], dt: float = 1.0, start: int = 1,
                     floor_mode: bool = False) -> list[int]:
    """Plain loop over the control rule: cut on drops, step up after a full
    quiet window, clamp to [1, k_max]. Timer resets on every decision point,
    including clamped ones."""
    m = start
    quiet = 0.0
    out = []
    for n in drops:
        if n > 0:
            x = m * dec_factor
            x = math.floor(x) if floor_mode else math.ceil(x)
            m = x if x > 1 else 1
            quiet = 0.0
        else:
            quiet += dt
            if quiet >= mon_window:
                if m < k_max:
                    m += 1
                quiet = 0.0
        out.append(m)
    return out


def stats_oracle(values) -> dict:
    """Two-pass statistics with the stdlib; population standard deviation."""
    vals = [float(v) for v in values]
    if not vals:
        return {"min": None, "mean": None, "median": None, "max": None,
                "stdev": None}
    return {
        "min": min(vals),
        "mean": sum(vals) / len(vals),
        "median": statistics.median(vals),
        "max": max(vals),
        "stdev": statistics.pstdev(vals),
    }
