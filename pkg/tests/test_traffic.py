import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dusched.config import random_small_gop, tiny1_gop
from dusched.traffic import (
    DuClass,
    DuInstance,
    GopError,
    GopStructure,
    Member,
    SizeStream,
    TrafficState,
    advance_traffic,
    build_context_table,
    context_step,
    initial_state,
    require_valid,
    sample_arrival_sizes,
    validate_gop,
)


def two_class(q=(2.0, 1.0), offsets=(0, 1), W=2, parents2=(1,)):
    return GopStructure(
        (
            DuClass(1, q[0], offsets[0], 2, (0.5, 0.5)),
            DuClass(2, q[1], offsets[1], 2, (0.5, 0.5), parents=frozenset(parents2)),
        ),
        period_T=2,
        stw_W=W,
    )


def test_valid_two_class_gop():
    assert validate_gop(two_class()).ok


def test_impact_ordering_violation():
    rep = validate_gop(two_class(q=(1.0, 2.0)))
    assert not rep.ok
    assert "dependency impact ordering violated" in str(rep)
    assert rep.violations[0].classes == (2, 1)


def test_dependency_cycle():
    gop = GopStructure(
        (
            DuClass(1, 2.0, 0, 1, (1.0,), parents=frozenset({2})),
            DuClass(2, 1.0, 1, 1, (1.0,), parents=frozenset({1})),
        ),
        2,
        2,
    )
    rep = validate_gop(gop)
    assert "cycle" in str(rep)
    with pytest.raises(GopError):
        require_valid(gop)


def test_stw_and_pmf_violations():
    assert "STW condition violated" in str(validate_gop(two_class(offsets=(0, 2), W=2)))
    bad = GopStructure((DuClass(1, 1.0, 0, 2, (0.7, 0.2)),), 1, 1)
    assert "malformed PMF" in str(validate_gop(bad))
    short = GopStructure((DuClass(1, 1.0, 0, 3, (0.5, 0.5)),), 1, 1)
    assert "malformed PMF" in str(validate_gop(short))


def test_offset_outside_every_window():
    gop = GopStructure((DuClass(1, 1.0, 3, 1, (1.0,)),), 2, 1)
    assert "never enter a context" in str(validate_gop(gop))


def test_degenerate_single_context():
    gop = GopStructure((DuClass(1, 1.0, 0, 1, (1.0,)),), 1, 1)
    (ctx,) = build_context_table(gop)
    assert ctx.members == (Member(1, 0, 0),)


def test_tiny1_context_table():
    c0, c1 = build_context_table(tiny1_gop())
    # hand enumeration of deadline windows [t, t+2) with T=2, offsets (0, 1)
    assert c0.members == (Member(1, 0, 0), Member(2, 0, 1))
    assert c1.members == (Member(2, 0, 0), Member(1, 1, 1))
    lives = [m.lifetime for ctx in (c1, c0) for m in ctx.members if m.class_id == 1]
    assert lives == [1, 0]


def test_ipbpb_context_composition_repeats():
    # I, B, P due in consecutive slots, B depends on I and P
    gop = GopStructure(
        (
            DuClass(1, 3.0, 0, 1, (1.0,)),
            DuClass(2, 1.0, 1, 1, (1.0,), parents=frozenset({1, 3})),
            DuClass(3, 2.0, 1, 1, (1.0,), parents=frozenset({1})),
        ),
        3,
        3,
    )
    ctx = build_context_table(gop)
    assert len(ctx) == 3
    assert sorted(m.class_id for m in ctx[0].members) == [1, 2, 3]
    assert {m.gop_offset for m in ctx[0].members} == {0}


def test_context_step_tiny1():
    ctx = build_context_table(tiny1_gop())
    s0 = context_step(ctx, 0)
    assert s0.successor == (-1, 0)
    assert s0.arriving == (1,)
    s1 = context_step(ctx, 1)
    # class 2 expires, class 1 of the next GOP persists into phase 0
    assert s1.successor == (-1, 0)
    assert s1.arriving == (1,)


def test_point_mass_and_empty_arrivals():
    gop = GopStructure((DuClass(1, 1.0, 0, 3, (0.0, 0.0, 1.0)),), 1, 1)
    rng = np.random.default_rng(0)
    assert set(sample_arrival_sizes(gop, [1] * 50, rng)) == {3}
    assert sample_arrival_sizes(gop, [], rng).size == 0


def test_uniform_sizes_frequency():
    gop = GopStructure((DuClass(1, 1.0, 0, 2, (0.5, 0.5)),), 1, 1)
    s = sample_arrival_sizes(gop, [1] * 100_000, np.random.default_rng(1))
    assert abs(np.mean(s == 1) - 0.5) < 0.01


def test_size_stream_is_order_independent():
    gop = tiny1_gop()
    a = SizeStream(gop, np.random.default_rng(5))
    b = SizeStream(gop, np.random.default_rng(5))
    late = b.sizes(4)
    assert [a.sizes(g) for g in range(5)][-1] == late


def test_advance_persisting():
    gop = GopStructure((DuClass(1, 2.0, 1, 3, (0, 0, 1.0)), DuClass(2, 1.0, 1, 3, (0, 0, 1.0))), 1, 2)
    ctx = build_context_table(gop)
    st0 = initial_state(gop, ctx, 0, lambda g, j: 2 if j == 1 else 1)
    assert st0.x == (2, 1, 2, 1)
    nxt, exp = advance_traffic(st0, (0, 0, 1, 0), (3, 3), ctx)
    # lifetime-1 members persist with x - y, fresh ones arrive
    assert [e.residual for e in exp] == [2, 1]
    assert nxt.x[:2] == (1, 1)


def test_advance_expiry_reports_residual():
    gop = tiny1_gop()
    ctx = build_context_table(gop)
    st0 = TrafficState(0, ctx[0], (DuInstance(1, 0, 0, 2, 2), DuInstance(2, 0, 1, 1, 1)))
    nxt, exp = advance_traffic(st0, (0, 0), (1,), ctx)
    assert exp[0].instance.class_id == 1 and exp[0].residual == 2
    assert all(d.class_id != 1 or d.gop_id == 1 for d in nxt.instances)


def test_tiny1_phase1_to_0_arrival():
    gop = tiny1_gop()
    ctx = build_context_table(gop)
    st1 = TrafficState(1, ctx[1], (DuInstance(2, 0, 1, 1, 2), DuInstance(1, 1, 2, 2, 2)))
    nxt, exp = advance_traffic(st1, (1, 1), (2,), ctx)
    assert [(e.instance.class_id, e.residual) for e in exp] == [(2, 0)]
    assert nxt.context.phase == 0
    assert nxt.instances == (DuInstance(1, 1, 2, 1, 2), DuInstance(2, 1, 3, 2, 2))


def test_advance_rejects_infeasible():
    gop = tiny1_gop()
    ctx = build_context_table(gop)
    st0 = initial_state(gop, ctx, 0, lambda g, j: 1)
    with pytest.raises(ValueError):
        advance_traffic(st0, (2, 0), (1,), ctx)


def test_gop_dict_round_trip():
    gop = tiny1_gop()
    assert GopStructure.from_dict(gop.to_dict()) == gop


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_context_periodicity_and_windows(seed, K):
    gop = random_small_gop(np.random.default_rng(seed))
    ctx = build_context_table(gop)
    T, W = gop.period_T, gop.stw_W
    assert len(ctx) == T
    visits = [0] * T
    for t in range(K * T):
        visits[t % T] += 1
        for m in ctx[t % T].members:
            deadline = (t // T + m.gop_offset) * T + gop.cls(m.class_id).deadline_offset
            assert t <= deadline < t + W
            assert m.lifetime == deadline - t
    assert visits == [K] * T
    # every class instance is live for exactly W slots
    assert sum(len(c) for c in ctx) == W * gop.n_classes


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_buffer_conservation(seed):
    rng = np.random.default_rng(seed)
    gop = random_small_gop(rng)
    ctx = build_context_table(gop)
    stream = SizeStream(gop, rng)
    state = initial_state(gop, ctx, 0, stream.size)
    sent = {}
    for t in range(6 * gop.period_T):
        y = [int(rng.integers(0, x + 1)) for x in state.x]
        for d, yf in zip(state.instances, y):
            sent[(d.class_id, d.gop_id)] = sent.get((d.class_id, d.gop_id), 0) + yf
        step = context_step(ctx, state.context.phase)
        nxt = ctx[(state.context.phase + 1) % gop.period_T]
        g1 = (t + 1) // gop.period_T
        sizes = [stream.size(g1 + nxt.members[i].gop_offset, nxt.members[i].class_id) for i in step.arriving]
        state, expired = advance_traffic(state, y, sizes, ctx)
        for e in expired:
            d = e.instance
            assert sent[(d.class_id, d.gop_id)] + e.residual == d.arrived_size
        assert all(0 <= d.buffer_x <= d.arrived_size for d in state.instances)
        assert all(state.t <= d.deadline < state.t + gop.stw_W for d in state.instances)
