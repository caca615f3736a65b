"""DU classes, the periodic GOP/context structure and buffer evolution.

A GOP holds N data-unit classes. Class ``j`` of GOP ``g`` has the absolute
deadline ``g*T + deadline_offset``; it is live (a member of the context) in
every slot ``t`` with ``t <= deadline < t + W``, so every DU is live for
exactly ``W`` consecutive slots and enters the window with all its packets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import networkx as nx
import numpy as np

PMF_TOL = 1e-12


class GopError(ValueError):
    """A GOP structure violates one of its invariants."""


@dataclass(frozen=True)
class DuClass:
    class_id: int
    impact_q: float
    deadline_offset: int
    size_max: int
    size_pmf: tuple[float, ...]
    parents: frozenset[int] = frozenset()
    # decay rate of the dependency factor exp(-decay * residual)
    decay: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "size_pmf", tuple(float(p) for p in self.size_pmf))
        object.__setattr__(self, "parents", frozenset(int(p) for p in self.parents))

    @property
    def mean_size(self) -> float:
        return float(sum((k + 1) * p for k, p in enumerate(self.size_pmf)))

    def to_dict(self) -> dict:
        return {
            "id": self.class_id,
            "impact": self.impact_q,
            "deadline": self.deadline_offset,
            "size_max": self.size_max,
            "pmf": list(self.size_pmf),
            "parents": sorted(self.parents),
            "decay": self.decay,
        }


@dataclass(frozen=True)
class GopStructure:
    classes: tuple[DuClass, ...]
    period_T: int
    stw_W: int

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def cls(self, class_id: int) -> DuClass:
        return self.classes[class_id - 1]

    def deadline_gap(self, j: int, j_prime: int) -> int:
        """Constant deadline difference between classes ``j`` and ``j_prime``."""
        return self.cls(j).deadline_offset - self.cls(j_prime).deadline_offset

    def dependency_dag(self) -> nx.DiGraph:
        """Edges point parent -> child (the direction of prediction)."""
        dag = nx.DiGraph()
        dag.add_nodes_from(c.class_id for c in self.classes)
        for c in self.classes:
            dag.add_edges_from((p, c.class_id) for p in c.parents)
        return dag

    def ancestors(self, class_id: int) -> frozenset[int]:
        return frozenset(nx.ancestors(self.dependency_dag(), class_id))

    def descendants(self, class_id: int) -> frozenset[int]:
        return frozenset(nx.descendants(self.dependency_dag(), class_id))

    def to_dict(self) -> dict:
        return {
            "period": self.period_T,
            "window": self.stw_W,
            "classes": [c.to_dict() for c in self.classes],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GopStructure":
        classes = []
        for i, c in enumerate(d["classes"], start=1):
            classes.append(
                DuClass(
                    class_id=int(c.get("id", i)),
                    impact_q=float(c["impact"]),
                    deadline_offset=int(c["deadline"]),
                    size_max=int(c["size_max"]),
                    size_pmf=tuple(c["pmf"]),
                    parents=frozenset(c.get("parents", ())),
                    decay=float(c.get("decay", 0.5)),
                )
            )
        return cls(tuple(classes), int(d["period"]), int(d["window"]))


class Violation(NamedTuple):
    kind: str
    classes: tuple[int, ...]
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, classes: tuple[int, ...], message: str) -> None:
        self.violations.append(Violation(kind, classes, message))

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(v.message for v in self.violations)


def validate_gop(gop: GopStructure) -> ValidationReport:
    report = ValidationReport()
    if gop.period_T < 1:
        report.add("period", (), f"period_T must be positive, got {gop.period_T}")
    if gop.stw_W < 1:
        report.add("window", (), f"stw_W must be positive, got {gop.stw_W}")
    ids = [c.class_id for c in gop.classes]
    if ids != list(range(1, len(ids) + 1)):
        report.add("ids", tuple(ids), f"class ids must be 1..N in order, got {ids}")
        return report

    for c in gop.classes:
        j = c.class_id
        if c.impact_q < 0:
            report.add("impact", (j,), f"class {j}: negative impact {c.impact_q}")
        if c.deadline_offset < 0:
            report.add("deadline", (j,), f"class {j}: negative deadline offset")
        if c.deadline_offset >= gop.period_T + gop.stw_W:
            report.add(
                "window",
                (j,),
                f"class {j}: deadline offset {c.deadline_offset} >= T + W, "
                "the DU would never enter a context",
            )
        if c.size_max < 1:
            report.add("pmf", (j,), f"class {j}: size_max must be >= 1")
        pmf = np.asarray(c.size_pmf, dtype=float)
        if len(pmf) != c.size_max:
            report.add(
                "pmf", (j,), f"class {j}: malformed PMF, {len(pmf)} entries for size_max {c.size_max}"
            )
        elif np.any(pmf < 0) or abs(pmf.sum() - 1.0) > PMF_TOL:
            report.add("pmf", (j,), f"class {j}: malformed PMF (sum {pmf.sum()!r})")
        if c.decay < 0:
            report.add("decay", (j,), f"class {j}: negative decay")
        for p in sorted(c.parents):
            if not 1 <= p <= len(ids):
                report.add("parent", (j, p), f"class {j}: unknown parent {p}")

    if any(v.kind == "parent" for v in report.violations):
        return report

    dag = gop.dependency_dag()
    if not nx.is_directed_acyclic_graph(dag):
        cycle = nx.find_cycle(dag)
        nodes = tuple(u for u, _ in cycle)
        report.add("cycle", nodes, f"cycle in dependency DAG through classes {nodes}")
        return report

    for child in gop.classes:
        for p in sorted(child.parents):
            parent = gop.cls(p)
            pair = (child.class_id, p)
            if child.impact_q > parent.impact_q:
                report.add(
                    "impact_order",
                    pair,
                    f"dependency impact ordering violated: class {child.class_id} "
                    f"(q={child.impact_q}) depends on class {p} (q={parent.impact_q})",
                )
            if child.deadline_offset < parent.deadline_offset:
                report.add(
                    "deadline_order",
                    pair,
                    f"dependency deadline ordering violated: class {child.class_id} "
                    f"is due before its parent {p}",
                )
            if child.deadline_offset - parent.deadline_offset >= gop.stw_W:
                report.add(
                    "stw",
                    pair,
                    f"STW condition violated: deadline gap between class {child.class_id} "
                    f"and parent {p} is not below W={gop.stw_W}",
                )
    return report


def require_valid(gop: GopStructure) -> GopStructure:
    report = validate_gop(gop)
    if not report.ok:
        raise GopError(str(report))
    return gop


class Member(NamedTuple):
    """A live DU relative to the current slot.

    ``gop_offset`` is the DU's GOP index minus the GOP index of the slot;
    ``lifetime`` is deadline minus slot (0 means the DU expires after this slot).
    """

    class_id: int
    gop_offset: int
    lifetime: int


class Context(NamedTuple):
    phase: int
    members: tuple[Member, ...]

    def __len__(self) -> int:
        return len(self.members)


def build_context_table(gop: GopStructure) -> list[Context]:
    require_valid(gop)
    T, W = gop.period_T, gop.stw_W
    table = []
    for tau in range(T):
        members = []
        for c in gop.classes:
            # lifetime = k*T + offset - tau must land in [0, W)
            k = -((c.deadline_offset - tau) // T)
            while k * T + c.deadline_offset - tau < W:
                members.append(Member(c.class_id, k, k * T + c.deadline_offset - tau))
                k += 1
        members.sort(key=lambda m: (m.lifetime, m.class_id))
        table.append(Context(tau, tuple(members)))
    return table


class Step(NamedTuple):
    """Member bookkeeping for the deterministic move from phase tau to tau+1."""

    # index in the next context for each current member, -1 if it expires
    successor: tuple[int, ...]
    # indices in the next context of DUs that enter the window
    arriving: tuple[int, ...]


def context_step(contexts: Sequence[Context], phase: int) -> Step:
    T = len(contexts)
    cur, nxt = contexts[phase], contexts[(phase + 1) % T]
    wrap = 1 if phase + 1 == T else 0
    where = {m: i for i, m in enumerate(nxt.members)}
    succ = []
    for m in cur.members:
        if m.lifetime == 0:
            succ.append(-1)
        else:
            succ.append(where[Member(m.class_id, m.gop_offset - wrap, m.lifetime - 1)])
    taken = set(succ)
    arriving = tuple(i for i in range(len(nxt.members)) if i not in taken)
    return Step(tuple(succ), arriving)


@dataclass(frozen=True)
class DuInstance:
    class_id: int
    gop_id: int
    deadline: int
    buffer_x: int
    arrived_size: int

    def __post_init__(self):
        if not 0 <= self.buffer_x <= self.arrived_size:
            raise ValueError(f"buffer {self.buffer_x} outside [0, {self.arrived_size}]")


@dataclass(frozen=True)
class TrafficState:
    t: int
    context: Context
    instances: tuple[DuInstance, ...]

    @property
    def x(self) -> tuple[int, ...]:
        return tuple(d.buffer_x for d in self.instances)


class Expiry(NamedTuple):
    instance: DuInstance
    residual: int


def sample_arrival_sizes(gop: GopStructure, arriving_classes: Sequence[int], rng) -> np.ndarray:
    """One size per arriving class drawn from the class PMF (support 1..size_max)."""
    ids = list(arriving_classes)
    if not ids:
        return np.zeros(0, dtype=np.int64)
    u = rng.random(len(ids))
    out = np.empty(len(ids), dtype=np.int64)
    for i, j in enumerate(ids):
        out[i] = int(np.searchsorted(_size_cdf(gop.cls(j).size_pmf), u[i], side="right")) + 1
    return out


def _size_cdf(pmf) -> np.ndarray:
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    return cdf


class SizeStream:
    """Per-GOP arrival sizes drawn lazily and strictly in GOP order.

    Drawing whole GOPs in order makes the sizes a function of (seed, gop, class)
    alone, so runs with different policies or windows see the same traffic.
    """

    def __init__(self, gop: GopStructure, rng, first_gop: int | None = None):
        self.gop = gop
        self.rng = rng
        max_off = max(c.deadline_offset for c in gop.classes)
        self.next_gop = (-max_off) // gop.period_T if first_gop is None else first_gop
        self._sizes: dict[int, list] = {}
        self._cdfs = [_size_cdf(c.size_pmf) for c in gop.classes]

    def sizes(self, g: int) -> list:
        while self.next_gop <= g:
            u = self.rng.random(len(self._cdfs))
            self._sizes[self.next_gop] = [
                int(np.searchsorted(cdf, v, side="right")) + 1 for cdf, v in zip(self._cdfs, u)
            ]
            self.next_gop += 1
        return self._sizes[g]

    def size(self, g: int, class_id: int) -> int:
        return self.sizes(g)[class_id - 1]

    def forget_before(self, g: int) -> None:
        for k in [k for k in self._sizes if k < g]:
            del self._sizes[k]


def initial_state(gop: GopStructure, contexts: Sequence[Context], t: int, size_of) -> TrafficState:
    """All DUs live at slot ``t`` enter with full sizes; ``size_of(g, j)`` gives sizes."""
    T = gop.period_T
    ctx = contexts[t % T]
    g0 = t // T
    inst = []
    for m in ctx.members:
        g = g0 + m.gop_offset
        size = int(size_of(g, m.class_id))
        inst.append(DuInstance(m.class_id, g, t + m.lifetime, size, size))
    return TrafficState(t, ctx, tuple(inst))


def advance_traffic(
    state: TrafficState,
    y: Sequence[int],
    arrival_sizes: Sequence[int],
    contexts: Sequence[Context],
) -> tuple[TrafficState, list[Expiry]]:
    """Apply decision ``y`` and move to the next slot.

    ``arrival_sizes`` is aligned with the arriving members of the next context
    (see :func:`context_step`). Returns the next state and the DUs that expired
    with their unsent residuals.
    """
    insts = state.instances
    if len(y) != len(insts):
        raise ValueError("decision length does not match the context")
    for d, yf in zip(insts, y):
        if not 0 <= yf <= d.buffer_x:
            raise ValueError(f"decision {yf} infeasible for buffer {d.buffer_x} (class {d.class_id})")
    T = len(contexts)
    phase = state.context.phase
    step = context_step(contexts, phase)
    if len(arrival_sizes) != len(step.arriving):
        raise ValueError(f"expected {len(step.arriving)} arrival sizes, got {len(arrival_sizes)}")
    nxt = contexts[(phase + 1) % T]
    t1 = state.t + 1
    g1 = t1 // T
    new: list[DuInstance | None] = [None] * len(nxt.members)
    expired = []
    for d, yf, s in zip(insts, y, step.successor):
        if s < 0:
            expired.append(Expiry(d, d.buffer_x - yf))
        else:
            new[s] = DuInstance(d.class_id, d.gop_id, d.deadline, d.buffer_x - yf, d.arrived_size)
    for i, size in zip(step.arriving, arrival_sizes):
        m = nxt.members[i]
        size = int(size)
        if not 1 <= size <= 10**9:
            raise ValueError(f"arrival size {size} must be positive")
        new[i] = DuInstance(m.class_id, g1 + m.gop_offset, t1 + m.lifetime, size, size)
    return TrafficState(t1, nxt, tuple(new)), expired
