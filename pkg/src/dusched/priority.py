"""Transmission priority between live DUs and the per-context priority graph.

``f`` has priority over ``f2`` when every packet of ``f`` should leave before
any packet of ``f2``. The graph stores an edge ``f2 -> f`` for that relation,
so edges point toward higher priority and the schedulable DUs (roots) are the
nodes without outgoing edges.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import networkx as nx

from .traffic import Context, GopStructure

INCOMPARABLE = None

ATTRIBUTE = "attribute"
DEPENDENCY = "dependency"
RULES = (ATTRIBUTE, DEPENDENCY)


def _attrs(f, gop):
    q = getattr(f, "impact_q", None)
    if q is None:
        q = gop.cls(f.class_id).impact_q
    return q, f.deadline


def attribute_order(q_f, d_f, q_g, d_g, stated_rule=False):
    """True if f outranks g, False if g outranks f, None when incomparable.

    The default compares deadlines the way the optimality argument needs
    (earlier deadline wins). ``stated_rule`` flips the deadline comparison to
    the literal "later deadline wins" variant; it exists only to show that the
    variant disagrees with the oracle.
    """
    if stated_rule:
        d_f, d_g = -d_f, -d_g
    if q_f >= q_g and d_f <= d_g and (q_f > q_g or d_f < d_g):
        return True
    if q_g >= q_f and d_g <= d_f and (q_g > q_f or d_g < d_f):
        return False
    return INCOMPARABLE


def higher_priority_independent(f, f_prime, gop: GopStructure | None = None, stated_rule=False):
    q_f, d_f = _attrs(f, gop)
    q_g, d_g = _attrs(f_prime, gop)
    return attribute_order(q_f, d_f, q_g, d_g, stated_rule)


def higher_priority_dependent(f, f_prime, dag: nx.DiGraph):
    """Priority along dependency paths; ``dag`` edges run parent -> child.

    ``f`` and ``f_prime`` are DAG nodes or DU instances (then the DAG is over
    class ids and DUs of different GOPs never depend on each other).
    """
    if hasattr(f, "class_id"):
        if f.gop_id != f_prime.gop_id:
            return INCOMPARABLE
        f, f_prime = f.class_id, f_prime.class_id
    if f == f_prime:
        return INCOMPARABLE
    if nx.has_path(dag, f, f_prime):
        return True
    if nx.has_path(dag, f_prime, f):
        return False
    return INCOMPARABLE


@dataclass(frozen=True)
class PriorityGraph:
    nodes: tuple
    edges: frozenset  # (lower, higher) pairs, transitively reduced

    @classmethod
    def from_relation(cls, nodes: Iterable[Hashable], higher: Iterable[tuple]) -> "PriorityGraph":
        """``higher`` yields pairs (f, g) meaning f outranks g."""
        g = nx.DiGraph()
        g.add_nodes_from(nodes)
        g.add_edges_from((low, high) for high, low in higher)
        if not nx.is_directed_acyclic_graph(g):
            raise ValueError("priority relation is cyclic")
        red = nx.transitive_reduction(g)
        return cls(tuple(g.nodes), frozenset(red.edges))

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(self.edges)
        return g

    def outranks(self, f, g) -> bool:
        """Reachability query: does ``f`` have priority over ``g``."""
        return f != g and nx.has_path(self.digraph(), g, f)

    def is_chain(self) -> bool:
        n = len(self.nodes)
        if n <= 1:
            return True
        g = self.digraph()
        if len(self.edges) != n - 1 or not nx.is_weakly_connected(g):
            return False
        return all(g.in_degree(v) <= 1 and g.out_degree(v) <= 1 for v in g)

    def __len__(self) -> int:
        return len(self.nodes)


def member_priority_pairs(context: Context, gop: GopStructure, rule: str, stated_rule=False):
    """All pairs (i, k) of member indices with member i outranking member k."""
    if rule not in RULES:
        raise ValueError(f"unknown priority rule {rule!r}")
    ms = context.members
    anc = {c.class_id: gop.ancestors(c.class_id) for c in gop.classes} if rule == DEPENDENCY else None
    pairs = []
    for i, a in enumerate(ms):
        for k, b in enumerate(ms):
            if i == k:
                continue
            if rule == ATTRIBUTE:
                qa, qb = gop.cls(a.class_id).impact_q, gop.cls(b.class_id).impact_q
                if attribute_order(qa, a.lifetime, qb, b.lifetime, stated_rule) is True:
                    pairs.append((i, k))
            elif a.gop_offset == b.gop_offset and a.class_id in anc[b.class_id]:
                pairs.append((i, k))
    return pairs


def build_priority_graph(context: Context, gop: GopStructure, rule: str = ATTRIBUTE, stated_rule=False) -> PriorityGraph:
    """Priority graph over member indices 0..len(context)-1."""
    pairs = member_priority_pairs(context, gop, rule, stated_rule)
    return PriorityGraph.from_relation(range(len(context.members)), pairs)


def roots(pg: PriorityGraph) -> set:
    g = pg.digraph()
    return {n for n in g.nodes if g.out_degree(n) == 0}


def remove(pg: PriorityGraph, f) -> PriorityGraph:
    if f not in roots(pg):
        raise ValueError(f"{f!r} is not a root of the priority graph")
    nodes = tuple(n for n in pg.nodes if n != f)
    edges = frozenset(e for e in pg.edges if f not in e)
    return PriorityGraph(nodes, edges)


def topological_order(pg: PriorityGraph, key=None) -> list:
    """Repeated root extraction; ``key`` picks among simultaneous roots."""
    order = []
    while pg.nodes:
        r = sorted(roots(pg), key=key)
        order.append(r[0])
        pg = remove(pg, r[0])
    return order


def respects(order: Sequence, pairs: Iterable[tuple]) -> bool:
    pos = {n: i for i, n in enumerate(order)}
    return all(pos[a] < pos[b] for a, b in pairs)
