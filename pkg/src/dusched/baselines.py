"""Comparison schedulers: one-slot optimum, constant-channel planner, EDF fill.

All of them return a packet count per context member and respect 0 <= y <= x.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import energy_cost
from .scheduler import TIE_TOL, SchedulingModel

KINDS = ("myopic", "rd_const", "edf")


@dataclass(frozen=True)
class BaselinePolicy:
    kind: str
    lam: float = 0.1
    avg_gain: float | None = None  # constant-channel planner; None = stationary mean
    cost_model: str = "linear"     # constant-channel planner: linear | convex
    budget: int = 4                # EDF packets per slot

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.avg_gain is not None and self.avg_gain <= 0:
            raise ValueError("avg_gain must be positive")
        if self.cost_model not in ("linear", "convex"):
            raise ValueError("cost_model must be linear or convex")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")


def _priority_order(P, gains):
    # members by per-packet gain, ties resolved by priority rank
    return sorted(range(len(gains)), key=lambda i: (-gains[i], P.rank[i]))


def myopic_schedule(model: SchedulingModel, phase: int, x, h: int, lam: float | None = None, factors=None) -> tuple:
    """Exact one-slot optimum of impact minus weighted energy.

    Packets of one DU are worth the same, and marginal energy only grows, so
    filling DUs by decreasing per-packet gain is optimal; a packet is sent
    only when it strictly pays off.
    """
    lam = model.lam if lam is None else lam
    P = model.phases[phase]
    crow = model.cost[h]
    gains = [P.q[i] * (factors[i] if factors is not None else 1.0) for i in range(len(x))]
    y = [0] * len(x)
    load = 0
    for i in _priority_order(P, gains):
        while y[i] < x[i] and gains[i] - lam * (crow[load + 1] - crow[load]) > TIE_TOL:
            y[i] += 1
            load += 1
        if y[i] < x[i]:
            break
    return tuple(y)


def _frozen_marginals(model: SchedulingModel, avg_gain: float, cost_model: str, n: int):
    if cost_model == "linear":
        slope = float(energy_cost(_FrozenChannel(model, avg_gain), 0, 1))
        return [slope] * n
    c = energy_cost(_FrozenChannel(model, avg_gain), 0, np.arange(n + 1))
    return list(np.diff(c))


class _FrozenChannel:
    """Single-state stand-in carrying the assumed average gain."""

    def __init__(self, model, gain):
        self.gains = (gain,)
        self.bits_per_packet = model.channel.bits_per_packet
        self.cost_base = model.channel.cost_base


def constant_channel_rd_schedule(
    model: SchedulingModel,
    phase: int,
    x,
    lam: float | None = None,
    avg_gain: float | None = None,
    cost_model: str = "linear",
    factors=None,
) -> tuple:
    """Plan the remaining lifetimes against a frozen channel, execute slot 0.

    DUs are served in priority order; each packet goes to the cheapest slot
    still open to it (earliest on ties) if its impact beats the planned
    marginal cost there.
    """
    from .channel import average_gain

    lam = model.lam if lam is None else lam
    if avg_gain is None:
        avg_gain = average_gain(model.channel)
    P = model.phases[phase]
    n = len(x)
    horizon = max(P.life) + 1 if n else 0
    marg = _frozen_marginals(model, avg_gain, cost_model, int(sum(x)) + 1)
    planned = [0] * horizon
    y = [0] * n
    gains = [P.q[i] * (factors[i] if factors is not None else 1.0) for i in range(n)]
    for i in _priority_order(P, gains):
        for _ in range(x[i]):
            best = min(range(P.life[i] + 1), key=lambda s: (marg[planned[s]], s))
            if gains[i] - lam * marg[planned[best]] <= TIE_TOL:
                break
            planned[best] += 1
            if best == 0:
                y[i] += 1
    return tuple(y)


def edf_greedy_schedule(model: SchedulingModel, phase: int, x, h: int = 0, budget: int = 4) -> tuple:
    P = model.phases[phase]
    order = sorted(range(len(x)), key=lambda i: (P.life[i], -P.q[i], P.cls[i]))
    y = [0] * len(x)
    left = budget
    for i in order:
        take = min(x[i], left)
        y[i] = take
        left -= take
        if left == 0:
            break
    return tuple(y)


def run_baseline(policy: BaselinePolicy, model: SchedulingModel, phase, x, h, factors=None) -> tuple:
    if policy.kind == "myopic":
        return myopic_schedule(model, phase, x, h, policy.lam, factors)
    if policy.kind == "rd_const":
        return constant_channel_rd_schedule(model, phase, x, policy.lam, policy.avg_gain, policy.cost_model, factors)
    return edf_greedy_schedule(model, phase, x, h, policy.budget)
