"""Exact joint dynamic programming on small instances.

The joint state is (phase, channel, buffers of all live DUs) and, with
interdependent DUs, a quantized incoming factor for every live DU that has
ancestors. Value iteration runs over the whole periodic product chain.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .priority import build_priority_graph, topological_order
from .scheduler import INDEPENDENT, INTERDEPENDENT, TIE_TOL, SchedulingModel, ValueTable

FACTOR_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_STATE_CAP = 10**6


class StateSpaceTooLarge(ValueError):
    pass


@dataclass
class PhaseSpace:
    n: int
    bounds: list
    fac: list            # member indices carrying a factor digit
    strides: np.ndarray
    n_states: int
    digits: np.ndarray   # (n_states, n + len(fac))
    pair_state: np.ndarray
    pair_post: np.ndarray
    pair_gain: np.ndarray
    pair_ysum: np.ndarray
    pair_y: np.ndarray
    pair_pref: np.ndarray  # load committed before each member in priority order
    starts: np.ndarray
    A: sparse.csr_matrix = None  # post state -> next-phase state probabilities

    def index(self, x, g=()) -> int:
        return int(np.dot(self.strides, list(x) + list(g)))


@dataclass
class JointSolution:
    model: SchedulingModel
    spaces: list
    V: list          # per phase (H, S)
    U: list          # per phase (H, S), post-decision values
    policy: list     # per phase (H, S) chosen pair index
    residual: float
    iterations: int
    grid: tuple = FACTOR_GRID
    _attrib: list = field(default=None, repr=False)

    def state_index(self, phase, x, g=()):
        return self.spaces[phase].index(x, g)

    def value(self, phase, h, x, g=()) -> float:
        return float(self.V[phase][h, self.state_index(phase, x, g)])

    def post_value(self, phase, h, z, g=()) -> float:
        return float(self.U[phase][h, self.state_index(phase, z, g)])


def _factor_digit(value, grid):
    return int(np.argmin(np.abs(np.asarray(grid) - value)))


def _check_interdependent(model: SchedulingModel):
    gop = model.gop
    for c in gop.classes:
        for a in model.ancestors[c.class_id]:
            if c.deadline_offset - gop.cls(a).deadline_offset >= model.W:
                raise ValueError(
                    f"class {c.class_id} can arrive after its ancestor {a} expired; "
                    "the joint oracle needs every ancestor live at arrival"
                )


def state_space_size(model: SchedulingModel, grid=FACTOR_GRID) -> int:
    total = 0
    for tau, P in enumerate(model.phases):
        n_fac = sum(1 for j in P.cls if model.ancestors[j]) if model.mode == INTERDEPENDENT else 0
        total += model.n_channel * int(np.prod([m + 1 for m in P.size_max])) * len(grid) ** n_fac
    return total


def _build_phase(model: SchedulingModel, tau: int, grid) -> PhaseSpace:
    P = model.phases[tau]
    n = len(P.cls)
    interdep = model.mode == INTERDEPENDENT
    fac = [i for i in range(n) if interdep and model.ancestors[P.cls[i]]]
    radix = [m + 1 for m in P.size_max] + [len(grid)] * len(fac)
    strides = np.ones(len(radix), dtype=np.int64)
    for k in range(len(radix) - 2, -1, -1):
        strides[k] = strides[k + 1] * radix[k + 1]
    n_states = int(np.prod(radix)) if radix else 1
    digits = np.array(list(itertools.product(*[range(r) for r in radix])), dtype=np.int64).reshape(n_states, len(radix))
    pos_fac = {i: n + k for k, i in enumerate(fac)}
    exp_anc = [
        [a for a in range(n) if P.life[a] == 0 and i in P.dep_desc[a]] if interdep else [] for i in range(n)
    ]
    pg = build_priority_graph(P.context, model.gop, model.rule)
    order = topological_order(pg, key=lambda i: P.rank[i])
    ps, pp, pgain, pys, pyv, ppref = [], [], [], [], [], []
    starts = []
    for s in range(n_states):
        d = digits[s]
        x = d[:n]
        pi = [grid[d[pos_fac[i]]] if i in pos_fac else 1.0 for i in range(n)]
        base = int(s)
        starts.append(len(ps))
        for y in itertools.product(*[range(int(xi) + 1) for xi in x]):
            gain = 0.0
            for i in range(n):
                if y[i]:
                    eff = pi[i]
                    for a in exp_anc[i]:
                        eff *= np.exp(-P.decay[a] * (x[a] - y[a]))
                    gain += eff * P.q[i] * y[i]
            post = base - int(np.dot(strides[:n], y))
            pref = [0] * n
            acc = 0
            for i in order:
                pref[i] = acc
                acc += y[i]
            ps.append(s)
            pp.append(post)
            pgain.append(gain)
            pys.append(acc)
            pyv.append(y)
            ppref.append(pref)
    sp = PhaseSpace(
        n=n,
        bounds=list(P.size_max),
        fac=fac,
        strides=strides,
        n_states=n_states,
        digits=digits,
        pair_state=np.array(ps, dtype=np.int64),
        pair_post=np.array(pp, dtype=np.int64),
        pair_gain=np.array(pgain),
        pair_ysum=np.array(pys, dtype=np.int64),
        pair_y=np.array(pyv, dtype=np.int64).reshape(len(ps), n),
        pair_pref=np.array(ppref, dtype=np.int64).reshape(len(ps), n),
        starts=np.array(starts, dtype=np.int64),
    )
    return sp


def _build_transition(model: SchedulingModel, tau: int, cur: PhaseSpace, nxt: PhaseSpace, grid) -> sparse.csr_matrix:
    P = model.phases[tau]
    Pn = model.phases[(tau + 1) % model.T]
    n = cur.n
    one = _factor_digit(1.0, grid)
    pos_fac = {i: n + k for k, i in enumerate(cur.fac)}
    npos_fac = {i: nxt.n + k for k, i in enumerate(nxt.fac)}
    exp_anc = [[a for a in range(n) if P.life[a] == 0 and i in P.dep_desc[a]] for i in range(n)]
    # arrivals: offsets and probabilities shared by every post state
    arr_offs = np.zeros(1, dtype=np.int64)
    arr_prob = np.ones(1)
    fixed = 0
    for k in P.arriving:
        pmf = np.asarray(model.gop.cls(Pn.cls[k]).size_pmf)
        sizes = np.arange(1, len(pmf) + 1)
        arr_offs = (arr_offs[:, None] + sizes[None, :] * nxt.strides[k]).ravel()
        arr_prob = (arr_prob[:, None] * pmf[None, :]).ravel()
        if k in npos_fac:
            fixed += one * nxt.strides[npos_fac[k]]
    keep = arr_prob > 0
    arr_offs, arr_prob = arr_offs[keep], arr_prob[keep]
    base = np.empty(cur.n_states, dtype=np.int64)
    for s in range(cur.n_states):
        d = cur.digits[s]
        b = fixed
        for i, t in enumerate(P.successor):
            if t < 0:
                continue
            b += int(d[i]) * nxt.strides[t]
            if t in npos_fac:
                val = grid[d[pos_fac[i]]]
                for a in exp_anc[i]:
                    val *= np.exp(-P.decay[a] * d[a])
                b += _factor_digit(val, grid) * nxt.strides[npos_fac[t]]
        base[s] = b
    rows = np.repeat(np.arange(cur.n_states), len(arr_offs))
    cols = (base[:, None] + arr_offs[None, :]).ravel()
    vals = np.tile(arr_prob, cur.n_states)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(cur.n_states, nxt.n_states))


def build_spaces(model: SchedulingModel, state_cap=DEFAULT_STATE_CAP, grid=FACTOR_GRID):
    if model.mode == INTERDEPENDENT:
        _check_interdependent(model)
    size = state_space_size(model, grid)
    if size > state_cap:
        raise StateSpaceTooLarge(f"joint state space has {size} states, cap is {state_cap}")
    spaces = [_build_phase(model, tau, grid) for tau in range(model.T)]
    for tau in range(model.T):
        spaces[tau].A = _build_transition(model, tau, spaces[tau], spaces[(tau + 1) % model.T], grid)
    return spaces


def _q_values(model, sp, U_tau):
    cost = model.cost_np
    return sp.pair_gain[None, :] - model.lam * cost[:, sp.pair_ysum] + model.alpha * U_tau[:, sp.pair_post]


def _expect(model, sp, V_next):
    # U[h, z] = sum_h' P[h, h'] sum_l Pr(l) V_next[h', z (+) l]
    return model.channel.transition @ (sp.A @ V_next.T).T


def joint_value_iteration(model: SchedulingModel, tolerance=1e-10, max_iter=100_000, state_cap=DEFAULT_STATE_CAP, grid=FACTOR_GRID) -> JointSolution:
    spaces = build_spaces(model, state_cap, grid)
    T, H = model.T, model.n_channel
    V = [np.zeros((H, sp.n_states)) for sp in spaces]
    U = [np.zeros((H, sp.n_states)) for sp in spaces]
    resid = np.inf
    it = 0
    while it < max_iter:
        it += 1
        resid = 0.0
        for tau in reversed(range(T)):
            sp = spaces[tau]
            U[tau] = _expect(model, sp, V[(tau + 1) % T])
            newV = np.maximum.reduceat(_q_values(model, sp, U[tau]), sp.starts, axis=1)
            resid = max(resid, float(np.max(np.abs(newV - V[tau]))))
            V[tau] = newV
        if resid < tolerance:
            break
    # final Bellman residual and consistent post-decision values
    resid = 0.0
    policy = []
    for tau in range(T):
        sp = spaces[tau]
        U[tau] = _expect(model, sp, V[(tau + 1) % T])
        q = _q_values(model, sp, U[tau])
        best = np.maximum.reduceat(q, sp.starts, axis=1)
        resid = max(resid, float(np.max(np.abs(best - V[tau]))))
        pol = np.empty((H, sp.n_states), dtype=np.int64)
        for h in range(H):
            ok = np.flatnonzero(q[h] >= best[h][sp.pair_state] - TIE_TOL)
            pol[h] = ok[np.searchsorted(ok, sp.starts)]
        policy.append(pol)
    return JointSolution(model, spaces, V, U, policy, resid, it, tuple(grid))


def joint_greedy_action(sol: JointSolution, phase: int, h: int, x, g=()) -> tuple:
    sp = sol.spaces[phase]
    k = sol.policy[phase][h, sp.index(x, g)]
    return tuple(int(v) for v in sp.pair_y[k])


def factor_digits(sol: JointSolution, phase: int, factors) -> tuple:
    """Quantized factor digits of the members that carry one."""
    return tuple(_factor_digit(factors[i], sol.grid) for i in sol.spaces[phase].fac)


def attributed_values(sol: JointSolution):
    """Per-member share of the oracle policy's value, per phase: (V, U) arrays (n, H, S).

    Each member is credited with its own packets' impact minus the marginal
    energy it adds on top of the members ahead of it in priority order; the
    shares sum to the joint slot utility. A member's share ends at its expiry.
    """
    if sol._attrib is not None:
        return sol._attrib
    model = sol.model
    if model.mode != INDEPENDENT:
        raise ValueError("attribution covers independent DUs")
    T, H = model.T, model.n_channel
    cost = model.cost_np
    hh = np.arange(H)[:, None]
    Va = [np.zeros((sp.n, H, sp.n_states)) for sp in sol.spaces]
    Ua = [np.zeros((sp.n, H, sp.n_states)) for sp in sol.spaces]
    for _ in range(model.W + 1):
        for tau in reversed(range(T)):
            sp = sol.spaces[tau]
            P = model.phases[tau]
            pol = sol.policy[tau]
            post = sp.pair_post[pol]
            for i in range(sp.n):
                s = P.successor[i]
                if s < 0:
                    Ua[tau][i] = 0.0
                else:
                    Ua[tau][i] = _expect(model, sp, Va[(tau + 1) % T][s])
                y = sp.pair_y[pol, i]
                pref = sp.pair_pref[pol, i]
                r = P.q[i] * y - model.lam * (cost[hh, pref + y] - cost[hh, pref])
                Va[tau][i] = r + model.alpha * Ua[tau][i][hh, post]
    sol._attrib = (Va, Ua)
    return sol._attrib


def per_du_projection(sol: JointSolution) -> ValueTable:
    """Oracle counterpart of the learned tables: a member's attributed
    post-decision value with only its own buffer nonempty."""
    model = sol.model
    _, Ua = attributed_values(sol)
    tab = ValueTable.zeros(model)
    for tau, sp in enumerate(sol.spaces):
        P = model.phases[tau]
        for i in range(sp.n):
            j, r = P.cls[i], P.life[i]
            for x in range(P.size_max[i] + 1):
                idx = int(x * sp.strides[i])
                tab.values[j - 1][r, :, x] = Ua[tau][i][:, idx]
    tab.refresh()
    return tab


def check_lemma1_predicate(sol: JointSolution, phase: int, f: int, f_prime: int) -> bool:
    """alpha*(U(z+e_f) - U(z+e_f')) < q_f - q_f' for every channel and every
    post state z where both shifted states exist."""
    model = sol.model
    sp = sol.spaces[phase]
    P = model.phases[phase]
    ok = (sp.digits[:, f] < sp.bounds[f]) & (sp.digits[:, f_prime] < sp.bounds[f_prime])
    z = np.flatnonzero(ok)
    if z.size == 0:
        return True
    U = sol.U[phase]
    lhs = model.alpha * (U[:, z + sp.strides[f]] - U[:, z + sp.strides[f_prime]])
    return bool(np.all(lhs < P.q[f] - P.q[f_prime]))


def priority_invariant_violations(sol: JointSolution) -> int:
    """Enumerated states where the oracle policy sends from a lower-priority
    member while a higher-priority one keeps a residual."""
    model = sol.model
    bad = 0
    for tau, sp in enumerate(sol.spaces):
        P = model.phases[tau]
        pol = sol.policy[tau]
        y = sp.pair_y[pol]                      # (H, S, n)
        x = sp.digits[:, : sp.n][None, :, :]
        for i, k in P.pairs:
            bad += int(np.count_nonzero((x[..., i] - y[..., i]) * y[..., k]))
    return bad
