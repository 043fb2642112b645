"""Trace-free inputs: synthetic spot price traces and workloads."""

from __future__ import annotations

import random
from typing import Sequence

from spotsim.market import InstanceType, PriceTrace

# spot prices were quoted to a tenth of a cent
TICK_MICROS = 1000


def constant_traces(catalog: Sequence[InstanceType], fraction: float) -> dict[str, PriceTrace]:
    """One flat trace per type at ``fraction`` of its on-demand price."""
    return {it.trace_key: PriceTrace([(0, max(1, round(it.ondemand_price * fraction)))]) for it in catalog}


def random_walk_traces(
    catalog: Sequence[InstanceType],
    rng: random.Random,
    span: int,
    step: int = 3600,
    mean_fraction: float = 0.35,
    reversion: float = 0.1,
    volatility: float = 0.05,
) -> dict[str, PriceTrace]:
    """Mean-reverting random walk per type, clamped strictly below on-demand.

    Each ``step`` seconds the price moves by ``reversion * (mean - p)`` plus
    Gaussian noise of scale ``volatility * mean``.  Only changes are recorded.
    """
    traces = {}
    for it in catalog:
        mean = it.ondemand_price * mean_fraction
        cap = it.ondemand_price - TICK_MICROS
        floor = max(TICK_MICROS, round(it.ondemand_price * 0.05))
        p = mean
        points = []
        last = None
        for t in range(0, span + 1, step):
            p += reversion * (mean - p) + rng.gauss(0.0, volatility * mean)
            p = min(max(p, floor), cap)
            q = max(TICK_MICROS, round(p / TICK_MICROS) * TICK_MICROS)
            q = min(q, cap)
            if q != last:
                points.append((t, q))
                last = q
        traces[it.trace_key] = PriceTrace(points)
    return traces
