"""Decomposed foresighted scheduling, value tables and online learning.

Per-DU value tables are indexed by (class, remaining lifetime, channel, buffer).
The lifetime of a class fixes the context phase it is seen in, so this is the
phase indexing in another coordinate; it also stays well defined when a class
has two live instances (window longer than the period).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .channel import ChannelModel
from .priority import ATTRIBUTE, DEPENDENCY, RULES, build_priority_graph, member_priority_pairs
from .traffic import Context, GopStructure, build_context_table, context_step

TIE_TOL = 1e-9
INDEPENDENT = "independent"
INTERDEPENDENT = "interdependent"
MODES = (INDEPENDENT, INTERDEPENDENT)
TABLE_FORMAT = "dusched-value-table 1"


def dependency_factor(beta_f: float, z) -> float:
    return math.exp(-beta_f * z)


@dataclass
class PhaseInfo:
    """Everything the schedulers need about one context phase, as plain lists."""

    context: Context
    cls: list          # class ids
    q: list
    life: list
    size_max: list
    gop_off: list
    decay: list
    n_above: list      # direct higher-priority neighbours
    below: list        # direct lower-priority neighbours
    lower_all: list    # every member this one outranks
    pairs: list        # (i, k): i outranks k
    rank: list         # root tie-break key
    successor: tuple   # index in the next phase, -1 on expiry
    arriving: tuple    # next-phase indices entering the window
    dep_desc: list     # same-GOP dependency descendants among members
    next_children: list  # next-phase indices of direct dependency children
    higher_arrivals: list  # per next-phase index: arriving indices that outrank it


class SchedulingModel:
    """Static description of one scheduling problem (traffic, channel, weights)."""

    def __init__(
        self,
        gop: GopStructure,
        channel: ChannelModel,
        lam: float,
        alpha: float,
        mode: str = INDEPENDENT,
        rule: str | None = None,
        pin_factors: bool = False,
        stated_rule: bool = False,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if rule is None:
            rule = ATTRIBUTE if mode == INDEPENDENT else DEPENDENCY
        if rule not in RULES:
            raise ValueError(f"unknown priority rule {rule!r}")
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        self.gop = gop
        self.channel = channel
        self.lam = float(lam)
        self.alpha = float(alpha)
        self.mode = mode
        self.rule = rule
        self.pin_factors = pin_factors
        self.contexts = build_context_table(gop)
        self.T = gop.period_T
        self.W = gop.stw_W
        self.n_channel = channel.n_states
        dag = gop.dependency_dag()
        self.children = {c.class_id: frozenset(dag.successors(c.class_id)) for c in gop.classes}
        self.descendants = {c.class_id: gop.descendants(c.class_id) for c in gop.classes}
        self.ancestors = {c.class_id: gop.ancestors(c.class_id) for c in gop.classes}
        self.y_cap = max(sum(gop.cls(m.class_id).size_max for m in ctx.members) for ctx in self.contexts)
        self.cost_np = channel.cost_table(self.y_cap)
        self.cost = [row.tolist() for row in self.cost_np]
        self.phases = [self._phase_info(tau, stated_rule) for tau in range(self.T)]
        self.max_gop_offset = max(c.deadline_offset for c in gop.classes)

    def _phase_info(self, tau: int, stated_rule: bool) -> PhaseInfo:
        gop = self.gop
        ctx = self.contexts[tau]
        nxt = self.contexts[(tau + 1) % self.T]
        ms = ctx.members
        n = len(ms)
        pg = build_priority_graph(ctx, gop, self.rule, stated_rule)
        pairs = member_priority_pairs(ctx, gop, self.rule, stated_rule)
        n_above = [0] * n
        below = [[] for _ in range(n)]
        for low, high in pg.edges:
            n_above[low] += 1
            below[high].append(low)
        lower_all = [[k for (i, k) in pairs if i == a] for a in range(n)]
        step = context_step(self.contexts, tau)
        wrap = 1 if tau + 1 == self.T else 0
        dep_desc = [
            [k for k, b in enumerate(ms) if b.gop_offset == a.gop_offset and b.class_id in self.descendants[a.class_id]]
            for a in ms
        ]
        next_children = [
            [
                k
                for k, b in enumerate(nxt.members)
                if b.gop_offset + wrap == a.gop_offset and b.class_id in self.children[a.class_id]
            ]
            for a in ms
        ]
        next_pairs = member_priority_pairs(nxt, gop, self.rule, stated_rule)
        arr = set(step.arriving)
        higher_arrivals = [[i for (i, k) in next_pairs if k == s and i in arr] for s in range(len(nxt.members))]
        cl = [gop.cls(m.class_id) for m in ms]
        return PhaseInfo(
            context=ctx,
            cls=[m.class_id for m in ms],
            q=[c.impact_q for c in cl],
            life=[m.lifetime for m in ms],
            size_max=[c.size_max for c in cl],
            gop_off=[m.gop_offset for m in ms],
            decay=[0.0 if self.pin_factors else c.decay for c in cl],
            n_above=n_above,
            below=[sorted(b) for b in below],
            lower_all=lower_all,
            pairs=pairs,
            rank=[(-c.impact_q, m.lifetime, m.class_id, m.gop_offset) for c, m in zip(cl, ms)],
            successor=step.successor,
            arriving=step.arriving,
            dep_desc=dep_desc,
            next_children=next_children,
            higher_arrivals=higher_arrivals,
        )

    def factor(self, class_id: int, z: int) -> float:
        if self.pin_factors:
            return 1.0
        return dependency_factor(self.gop.cls(class_id).decay, z)

    def describe(self) -> dict:
        return {
            "gop": self.gop.to_dict(),
            "channel": self.channel.to_dict(),
            "lambda": self.lam,
            "alpha": self.alpha,
            "mode": self.mode,
            "rule": self.rule,
            "pin_factors": self.pin_factors,
        }


class ValueTable:
    """U[j][r, h, x] for class j (0-based storage), lifetime r, channel h, buffer x."""

    def __init__(self, gop: GopStructure, n_channel: int, alpha: float, values=None, visits=None):
        W = gop.stw_W
        self.gop = gop
        self.alpha = float(alpha)
        self.n_channel = n_channel
        if values is None:
            values = [np.zeros((W, n_channel, c.size_max + 1)) for c in gop.classes]
        if visits is None:
            visits = [np.zeros((W, n_channel), dtype=np.int64) for _ in gop.classes]
        self.values = [np.asarray(v, dtype=float) for v in values]
        self.visits = [np.asarray(v, dtype=np.int64) for v in visits]
        self._rows = [[[v[r, h].tolist() for h in range(n_channel)] for r in range(W)] for v in self.values]

    @classmethod
    def zeros(cls, model: SchedulingModel) -> "ValueTable":
        return cls(model.gop, model.n_channel, model.alpha)

    def copy(self) -> "ValueTable":
        return ValueTable(self.gop, self.n_channel, self.alpha, [v.copy() for v in self.values], [v.copy() for v in self.visits])

    def row(self, class_id: int, r: int, h: int) -> list:
        return self._rows[class_id - 1][r][h]

    def set_row(self, class_id: int, r: int, h: int, values) -> None:
        arr = self.values[class_id - 1]
        arr[r, h] = values
        self._rows[class_id - 1][r][h] = arr[r, h].tolist()

    def refresh(self) -> None:
        """Resync the list mirror after editing ``values`` in place."""
        W = self.gop.stw_W
        self._rows = [[[v[r, h].tolist() for h in range(self.n_channel)] for r in range(W)] for v in self.values]

    def sup_distance(self, other: "ValueTable") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.values, other.values))

    def save(self, path, instance_hash: str = "") -> None:
        T = self.gop.period_T
        with open(path, "w") as fh:
            fh.write(f"# {TABLE_FORMAT}\n")
            fh.write(f"# instance {instance_hash}\n")
            fh.write(f"# alpha {self.alpha!r}\n")
            fh.write(f"# shape classes={len(self.values)} window={self.gop.stw_W} channels={self.n_channel}\n")
            fh.write("class_id,phase,lifetime,channel,x,value,visits\n")
            for j, (v, n) in enumerate(zip(self.values, self.visits), start=1):
                d = self.gop.cls(j).deadline_offset
                for r in range(v.shape[0]):
                    for h in range(v.shape[1]):
                        for x in range(v.shape[2]):
                            fh.write(f"{j},{(d - r) % T},{r},{h},{x},{float(v[r, h, x])!r},{int(n[r, h])}\n")

    @classmethod
    def load(cls, path, gop: GopStructure, n_channel: int, expect_hash: str | None = None) -> "ValueTable":
        meta = {}
        alpha = None
        tab = cls(gop, n_channel, 0.0)
        with open(path) as fh:
            first = fh.readline().strip()
            if first != f"# {TABLE_FORMAT}":
                raise ValueError(f"not a value table file: {first!r}")
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition(" ")
                    meta[key] = val
                    continue
                if line.startswith("class_id") or not line:
                    continue
                j, _phase, r, h, x, val, n = line.split(",")
                j, r, h, x = int(j), int(r), int(h), int(x)
                tab.values[j - 1][r, h, x] = float(val)
                tab.visits[j - 1][r, h] = int(n)
        alpha = float(meta.get("alpha", "nan"))
        if expect_hash is not None and meta.get("instance", "") != expect_hash:
            raise ValueError("value table was produced for a different instance")
        tab.alpha = alpha
        tab.refresh()
        return tab


class ScheduleDecision(NamedTuple):
    order: tuple
    amounts: tuple
    objectives: tuple
    overrides: int = 0  # sends suppressed to keep the priority invariant


def _best(gq, x, load, crow, urow, lam, au):
    """Smallest near-optimal y in 0..x and its objective."""
    c0 = crow[load]
    vals = [gq * y - lam * (crow[load + y] - c0) + au * urow[x - y] for y in range(x + 1)]
    thr = max(vals) - TIE_TOL
    for y, v in enumerate(vals):
        if v >= thr:
            return y, v


def single_du_decision(q, x, prior_load, cost_row, u_row, lam, alpha, factor=1.0):
    """Best packet count for one DU given the load already committed this slot.

    Maximizes factor*q*y - lam*(rho(load+y) - rho(load)) + alpha*factor*U[x-y];
    the incoming factor scales both the immediate and the continuation term.
    """
    if x == 0:
        return 0, alpha * factor * u_row[0]
    return _best(factor * q, int(x), int(prior_load), cost_row, u_row, lam, alpha * factor)


class Scheduler:
    """Greedy root selection over the priority graph (independent or interdependent)."""

    def __init__(self, model: SchedulingModel, tables: ValueTable):
        self.model = model
        self.tables = tables

    def decide(self, phase: int, x: Sequence[int], h: int, pi: list | None = None) -> ScheduleDecision:
        """``pi`` holds incoming factors per member; it is updated in place when a
        selected DU expires this slot (its residual is then final)."""
        m = self.model
        P = m.phases[phase]
        n = len(x)
        lam, alpha = m.lam, m.alpha
        crow = m.cost[h]
        rows_all = self.tables._rows
        rows = [rows_all[P.cls[i] - 1][P.life[i]][h] for i in range(n)]
        q, rank = P.q, P.rank
        pending = list(P.n_above)
        roots = [i for i in range(n) if pending[i] == 0]
        blocked = [False] * n
        y = [0] * n
        obj = [0.0] * n
        order = []
        load = 0
        overrides = 0
        interdep = pi is not None
        while roots:
            bi = -1
            by = 0
            bo = 0.0
            for i in roots:
                f = pi[i] if interdep else 1.0
                xi = x[i]
                if xi == 0 or blocked[i]:
                    yi, oi = 0, alpha * f * rows[i][xi]
                else:
                    yi, oi = _best(f * q[i], xi, load, crow, rows[i], lam, alpha * f)
                if bi < 0 or oi > bo + TIE_TOL or (oi >= bo - TIE_TOL and rank[i] < rank[bi]):
                    bi, by, bo = i, yi, oi
            if blocked[bi] and x[bi] > 0:
                f = pi[bi] if interdep else 1.0
                if _best(f * q[bi], x[bi], load, crow, rows[bi], lam, alpha * f)[0] > 0:
                    overrides += 1
            y[bi] = by
            obj[bi] = bo
            load += by
            order.append(bi)
            roots.remove(bi)
            for k in P.below[bi]:
                pending[k] -= 1
                if pending[k] == 0:
                    roots.append(k)
            if x[bi] > by:
                for k in P.lower_all[bi]:
                    blocked[k] = True
            if interdep and P.life[bi] == 0 and P.dep_desc[bi]:
                p = math.exp(-P.decay[bi] * (x[bi] - by))
                for k in P.dep_desc[bi]:
                    pi[k] *= p
        return ScheduleDecision(tuple(order), tuple(y), tuple(obj), overrides)


def schedule_independent(model: SchedulingModel, tables: ValueTable, phase, x, h) -> ScheduleDecision:
    return Scheduler(model, tables).decide(phase, list(x), h)


def schedule_interdependent(model: SchedulingModel, tables: ValueTable, phase, x, h, factors) -> ScheduleDecision:
    return Scheduler(model, tables).decide(phase, list(x), h, list(factors))


class StepSchedule:
    """Weight kept on the old value: harmonic (per-cell 1 - 1/n), global (1 - 1/t) or constant."""

    KINDS = ("harmonic", "global", "constant")

    def __init__(self, kind: str = "harmonic", beta: float = 0.99):
        if kind not in self.KINDS:
            raise ValueError(f"unknown step schedule {kind!r}")
        if not 0.0 <= beta <= 1.0:
            raise ValueError("constant step must lie in [0, 1]")
        self.kind = kind
        self.beta = beta

    def __call__(self, n_cell: int, t_global: int) -> float:
        if self.kind == "harmonic":
            return 1.0 - 1.0 / n_cell
        if self.kind == "global":
            return 1.0 - 1.0 / max(t_global, 1)
        return self.beta


class Learner:
    """Post-decision value learning from realized transitions.

    ``update`` is called once per slot after the decision at slot t, with the
    phase/channel of slot t-1 and the state and decision order of slot t.
    """

    LOAD_RULES = ("arrivals", "preceding_x", "preceding_y")

    def __init__(self, model: SchedulingModel, tables: ValueTable, schedule: StepSchedule | None = None, load_rule: str = "arrivals"):
        if load_rule not in self.LOAD_RULES:
            raise ValueError(f"unknown load rule {load_rule!r}")
        self.model = model
        self.tables = tables
        self.schedule = schedule or StepSchedule()
        self.load_rule = load_rule
        self.t = 0
        self._grids = {}
        for c in model.gop.classes:
            mx = c.size_max
            X, Y = np.meshgrid(np.arange(mx + 1), np.arange(mx + 1), indexing="ij")
            self._grids[c.class_id] = (Y, np.where(Y <= X, X - Y, 0), Y <= X)

    def target(self, class_id: int, r_next: int, h: int, load: int) -> np.ndarray:
        """max_y {q y - lam (rho(L+y) - rho(L)) + alpha U(r_next, h, x-y)} for every x."""
        m = self.model
        Y, XmY, ok = self._grids[class_id]
        q = m.gop.cls(class_id).impact_q
        crow = m.cost_np[h]
        U = self.tables.values[class_id - 1][r_next, h]
        vals = q * Y - m.lam * (crow[load + Y] - crow[load]) + m.alpha * U[XmY]
        return np.where(ok, vals, -np.inf).max(axis=1)

    def _apply(self, class_id: int, r: int, h: int, target) -> None:
        tab = self.tables
        cnt = tab.visits[class_id - 1]
        cnt[r, h] += 1
        beta = self.schedule(int(cnt[r, h]), self.t)
        old = tab.values[class_id - 1][r, h]
        tab.set_row(class_id, r, h, (1.0 - beta) * target + beta * old)

    def _loads(self, P: PhaseInfo, x, order, y):
        """Prior load per member of the new slot, used in the learning targets."""
        if self.load_rule == "arrivals":
            return [sum(x[a] for a in P.higher_arrivals[s]) for s in range(len(x))]
        v = x if self.load_rule == "preceding_x" else y
        loads = [0] * len(x)
        acc = 0
        for i in order:
            loads[i] = acc
            acc += v[i]
        return loads

    def update(self, prev_phase: int, prev_h: int, x: Sequence[int], h: int, order=None, y=None) -> None:
        m = self.model
        self.t += 1
        P = m.phases[prev_phase]
        nxt = m.phases[(prev_phase + 1) % m.T]
        interdep = m.mode == INTERDEPENDENT
        loads = self._loads(P, x, order, y)
        targets = []
        for i, s in enumerate(P.successor):
            j = P.cls[i]
            if s >= 0:
                load = loads[s]
                targets.append((j, P.life[i], self.target(j, nxt.life[s], h, load)))
            elif interdep and P.next_children[i]:
                targets.append((j, 0, self._expiry_target(P, i, nxt, x, h, loads)))
        # all targets are built from the tables before this slot's writes
        for j, r, tgt in targets:
            self._apply(j, r, prev_h, tgt)

    def _expiry_target(self, P: PhaseInfo, i: int, nxt: PhaseInfo, x, h, loads) -> np.ndarray:
        """Value an expiring DU's residual z by the loss it inflicts on its live children."""
        m = self.model
        z = np.arange(P.size_max[i] + 1)
        loss = np.exp(-P.decay[i] * z) - 1.0
        crow = m.cost[h]
        total = 0.0
        for k in P.next_children[i]:
            load = loads[k]
            row = self.tables.row(nxt.cls[k], nxt.life[k], h)
            total += single_du_decision(nxt.q[k], x[k], load, crow, row, m.lam, m.alpha)[1]
        return loss * total


def solve_tables(model: SchedulingModel) -> ValueTable:
    """Fixed point of the expected learning update (independent DUs).

    The prior load seen by a persisting DU comes from arrivals that outrank it,
    and under both priority rules no arrival outranks a persisting DU, so the
    fixed point is a backward recursion over the remaining lifetime.
    """
    if model.mode != INDEPENDENT:
        raise ValueError("the exact table solver covers independent DUs only")
    for P in model.phases:
        if any(P.higher_arrivals[s] for s in P.successor if s >= 0):
            raise ValueError("arrivals outrank persisting DUs; no closed-form fixed point")
    tabs = ValueTable.zeros(model)
    learner = Learner(model, tabs)
    Pm = model.channel.transition
    H = model.n_channel
    for c in model.gop.classes:
        j = c.class_id
        for r in range(1, model.W):
            per_h = np.array([learner.target(j, r - 1, hn, 0) for hn in range(H)])
            tabs.values[j - 1][r] = Pm @ per_h
    tabs.refresh()
    return tabs
