import csv
import itertools
from pathlib import Path

import numpy as np
import pytest

from dusched.baselines import myopic_schedule
from dusched.config import load_config, random_small_channel, random_small_gop, tiny1_channel, tiny1_gop
from dusched.oracle import (
    StateSpaceTooLarge,
    attributed_values,
    check_lemma1_predicate,
    joint_greedy_action,
    joint_value_iteration,
    per_du_projection,
    priority_invariant_violations,
    state_space_size,
)
from dusched.scheduler import INTERDEPENDENT, SchedulingModel
from dusched.traffic import DuClass, GopStructure, context_step

FIXTURE = Path(__file__).parent / "fixtures" / "tiny1_oracle.csv"
ROOT = Path(__file__).parent.parent


def tiny1(lam=0.1, alpha=0.95):
    return SchedulingModel(tiny1_gop(), tiny1_channel(), lam, alpha)


def naive_value_iteration(m, tol=1e-11):
    """Dictionary-based joint value iteration written straight from the dynamics."""
    gop, ch = m.gop, m.channel
    T, H = m.T, m.n_channel
    P = ch.transition
    states = {tau: list(itertools.product(*[range(gop.cls(mm.class_id).size_max + 1) for mm in m.contexts[tau].members])) for tau in range(T)}
    V = {(tau, h, x): 0.0 for tau in range(T) for h in range(H) for x in states[tau]}
    steps = [context_step(m.contexts, tau) for tau in range(T)]

    def expect_next(tau, h, z):
        nt = (tau + 1) % T
        step = steps[tau]
        nxt = m.contexts[nt]
        total = 0.0
        arr_cls = [nxt.members[k].class_id for k in step.arriving]
        for sizes in itertools.product(*[range(1, gop.cls(j).size_max + 1) for j in arr_cls]):
            p_l = np.prod([gop.cls(j).size_pmf[s - 1] for j, s in zip(arr_cls, sizes)]) if arr_cls else 1.0
            if p_l == 0:
                continue
            x1 = [0] * len(nxt.members)
            for i, s in enumerate(step.successor):
                if s >= 0:
                    x1[s] = z[i]
            for k, s in zip(step.arriving, sizes):
                x1[k] = s
            for h1 in range(H):
                total += P[h, h1] * p_l * V[(nt, h1, tuple(x1))]
        return total

    while True:
        delta = 0.0
        for tau in reversed(range(T)):
            q = [gop.cls(mm.class_id).impact_q for mm in m.contexts[tau].members]
            for h in range(H):
                for x in states[tau]:
                    best = -np.inf
                    for y in itertools.product(*[range(v + 1) for v in x]):
                        z = tuple(a - b for a, b in zip(x, y))
                        r = sum(qi * yi for qi, yi in zip(q, y)) - m.lam * m.cost[h][sum(y)]
                        best = max(best, r + m.alpha * expect_next(tau, h, z))
                    delta = max(delta, abs(best - V[(tau, h, x)]))
                    V[(tau, h, x)] = best
        if delta < tol:
            return V


def test_matches_naive_value_iteration():
    m = tiny1()
    sol = joint_value_iteration(m, tolerance=1e-11)
    V = naive_value_iteration(m)
    for (tau, h, x), v in V.items():
        assert sol.value(tau, h, x) == pytest.approx(v, abs=1e-7)


def test_golden_fixture():
    cfg = load_config(ROOT / "configs" / "tiny1.yaml")
    with open(FIXTURE) as fh:
        header = fh.readline()
        rows = list(csv.DictReader(fh))
    assert header.strip().endswith(f"instance={cfg.instance_hash()}")
    sol = joint_value_iteration(cfg.model(), cfg.oracle.tolerance)
    for r in rows:
        tau, h = int(r["phase"]), int(r["channel"])
        x = [int(v) for v in r["state"].split("-")]
        assert sol.value(tau, h, x) == pytest.approx(float(r["V"]), abs=1e-8)
        assert sol.post_value(tau, h, x) == pytest.approx(float(r["U"]), abs=1e-8)


def test_bellman_and_consistency():
    m = tiny1()
    sol = joint_value_iteration(m, tolerance=1e-10)
    assert sol.residual < 1e-9
    for tau, sp in enumerate(sol.spaces):
        again = m.channel.transition @ (sp.A @ sol.V[(tau + 1) % m.T].T).T
        assert np.max(np.abs(again - sol.U[tau])) <= 10 * 1e-10


def test_lambda_zero_sends_everything():
    m = tiny1(lam=0.0, alpha=0.9)
    sol = joint_value_iteration(m)
    for tau, sp in enumerate(sol.spaces):
        for h in range(2):
            for s in range(sp.n_states):
                x = tuple(int(v) for v in sp.digits[s])
                assert joint_greedy_action(sol, tau, h, x) == x
    # expected discounted impact of arrivals: 1.5 packets per class per GOP
    per_slot = (2.0 * 1.5 + 1.0 * 1.5) / 2
    x0 = (0, 0)
    assert sol.value(0, 0, x0) == pytest.approx(0.9 * per_slot / (1 - 0.9), rel=0.1)


def test_alpha_zero_is_myopic():
    m = tiny1(alpha=0.0)
    sol = joint_value_iteration(m)
    for tau, sp in enumerate(sol.spaces):
        for h in range(2):
            for s in range(sp.n_states):
                x = [int(v) for v in sp.digits[s]]
                y = myopic_schedule(m, tau, x, h)
                u = sum(q * a for q, a in zip(m.phases[tau].q, y)) - m.lam * m.cost[h][sum(y)]
                assert sol.V[tau][h, s] == pytest.approx(u, abs=1e-9)


def test_zero_buffer_zero_action():
    sol = joint_value_iteration(tiny1())
    assert joint_greedy_action(sol, 0, 1, (0, 0)) == (0, 0)


def test_priority_predicate_tiny1():
    sol = joint_value_iteration(tiny1())
    assert check_lemma1_predicate(sol, 0, 0, 1)
    assert not check_lemma1_predicate(sol, 0, 1, 0)
    assert not check_lemma1_predicate(sol, 0, 0, 0)


def test_oracle_policy_respects_invariant():
    assert priority_invariant_violations(joint_value_iteration(tiny1())) == 0


def test_attribution_exact_without_window_coupling():
    # W=1: every DU lives one slot, so the shares add up to the value gain over an empty buffer
    gop = GopStructure((DuClass(1, 2.0, 0, 3, (0.2, 0.3, 0.5)), DuClass(2, 1.2, 0, 2, (0.5, 0.5))), 1, 1)
    m = SchedulingModel(gop, tiny1_channel(), 0.2, 0.9)
    sol = joint_value_iteration(m)
    Va, _ = attributed_values(sol)
    sp = sol.spaces[0]
    empty = sp.index([0, 0])
    for h in range(2):
        assert np.allclose(Va[0][:, h, :].sum(axis=0), sol.V[0][h] - sol.V[0][h, empty], atol=1e-9)


def test_projection_zero_at_expiry():
    proj = per_du_projection(joint_value_iteration(tiny1()))
    assert all(np.all(v[0] == 0.0) for v in proj.values)


def test_state_cap_refusal():
    m = tiny1()
    assert state_space_size(m) == 36
    with pytest.raises(StateSpaceTooLarge, match="36 states"):
        joint_value_iteration(m, state_cap=10)


def test_interdependent_pinned_equals_independent():
    mi = tiny1()
    md = SchedulingModel(tiny1_gop(), tiny1_channel(), 0.1, 0.95, mode=INTERDEPENDENT, pin_factors=True)
    si, sd = joint_value_iteration(mi), joint_value_iteration(md)
    one = len(sd.grid) - 1
    for tau, sp in enumerate(si.spaces):
        for h in range(2):
            for s in range(sp.n_states):
                x = [int(v) for v in sp.digits[s]]
                g = [one] * len(sd.spaces[tau].fac)
                assert sd.value(tau, h, x, g) == pytest.approx(si.V[tau][h, s], abs=1e-8)


def test_interdependent_factors_lower_value():
    md = SchedulingModel(tiny1_gop(), tiny1_channel(), 0.1, 0.95, mode=INTERDEPENDENT)
    mi = tiny1()
    sd, si = joint_value_iteration(md), joint_value_iteration(mi)
    one = len(sd.grid) - 1
    # a partially delivered parent can only hurt the child
    assert sd.value(0, 0, [0, 0], [one]) <= si.value(0, 0, [0, 0]) + 1e-9


def test_random_small_instances_solve():
    rng = np.random.default_rng(11)
    for _ in range(5):
        m = SchedulingModel(random_small_gop(rng), random_small_channel(rng), 0.2, 0.9)
        sol = joint_value_iteration(m)
        assert sol.residual < 1e-8
        assert priority_invariant_violations(sol) == 0
