"""Time-slotted simulation engine, metrics and experiment drivers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .baselines import BaselinePolicy, run_baseline
from .channel import average_gain, channel_path, stationary_distribution
from .scheduler import INTERDEPENDENT, Learner, Scheduler, SchedulingModel, StepSchedule, ValueTable
from .traffic import SizeStream

POLICIES = ("proposed", "myopic", "rd_const", "edf", "oracle")


@dataclass
class Metrics:
    slots: int = 0
    distortion: float = 0.0          # impact delivered, weighted by the factors in force
    energy: float = 0.0
    utility: float = 0.0             # undiscounted sum of slot utilities
    discounted_utility: float = 0.0
    decoded_distortion: float = 0.0  # impact of expired DUs under their final factors
    arrived_packets: int = 0
    arrived_impact: float = 0.0
    sent_packets: int = 0
    expired_dus: int = 0
    missed_dus: int = 0
    residual_packets: int = 0
    invariant_violations: int = 0
    accounting_violations: int = 0
    overrides: int = 0
    residual_by_class: dict = field(default_factory=dict)
    misses_by_class: dict = field(default_factory=dict)
    trace: list | None = None

    @property
    def mean_utility(self) -> float:
        return self.utility / self.slots if self.slots else 0.0

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        d["mean_utility"] = self.mean_utility
        return d


class ProposedPolicy:
    def __init__(self, model: SchedulingModel, tables: ValueTable):
        self.sched = Scheduler(model, tables)
        self.interdep = model.mode == INTERDEPENDENT

    def __call__(self, phase, x, h, pis):
        d = self.sched.decide(phase, x, h, list(pis) if self.interdep else None)
        self.last_order = d.order
        return d.amounts, d.overrides


class BaselineRunner:
    def __init__(self, model: SchedulingModel, policy: BaselinePolicy):
        if policy.kind == "rd_const" and policy.avg_gain is None:
            policy = BaselinePolicy(policy.kind, policy.lam, average_gain(model.channel), policy.cost_model, policy.budget)
        self.model = model
        self.policy = policy
        self.interdep = model.mode == INTERDEPENDENT

    def __call__(self, phase, x, h, pis):
        return run_baseline(self.policy, self.model, phase, x, h, pis if self.interdep else None), 0


class OraclePolicy:
    def __init__(self, solution):
        from .oracle import factor_digits, joint_greedy_action

        self.sol = solution
        self._act = joint_greedy_action
        self._digits = factor_digits

    def __call__(self, phase, x, h, pis):
        g = self._digits(self.sol, phase, pis) if pis is not None else ()
        return self._act(self.sol, phase, h, x, g), 0


def simulate(
    model: SchedulingModel,
    policy,
    slots: int,
    seed: int,
    learner: Learner | None = None,
    trace: bool = False,
    check: bool = True,
) -> Metrics:
    """Run one episode from slot 0 with every live DU at its full sampled size.

    Arrival sizes and channel transitions come from two independent streams
    derived from ``seed`` and do not depend on the decisions, so different
    policies see identical traffic and channel paths.
    """
    met = Metrics(trace=[] if trace else None)
    met.residual_by_class = {c.class_id: 0 for c in model.gop.classes}
    met.misses_by_class = {c.class_id: 0 for c in model.gop.classes}
    if slots <= 0:
        return met
    traffic_ss, channel_ss = np.random.SeedSequence(seed).spawn(2)
    sizes = SizeStream(model.gop, np.random.default_rng(traffic_ss))
    crng = np.random.default_rng(channel_ss)
    pi0 = stationary_distribution(model.channel) if model.n_channel > 1 else np.ones(1)
    h0 = min(int(np.searchsorted(np.cumsum(pi0), crng.random(), side="right")), model.n_channel - 1)
    path = channel_path(model.channel, h0, slots, crng).tolist()

    T = model.T
    lam, alpha = model.lam, model.alpha
    phases = model.phases
    cost = model.cost
    interdep = model.mode == INTERDEPENDENT
    desc = model.descendants
    n_cls = model.gop.n_classes
    q_of = [0.0] + [c.impact_q for c in model.gop.classes]
    decay_of = [0.0] + [0.0 if model.pin_factors else c.decay for c in model.gop.classes]

    # live state aligned with the members of the current phase
    P = phases[0]
    x = [sizes.size(off, j) for j, off in zip(P.cls, P.gop_off)]
    arrived = list(x)
    sent = [0] * len(x)
    if slots > 0:
        met.arrived_packets = sum(x)
        met.arrived_impact = sum(q_of[j] * s for j, s in zip(P.cls, x))
    factors: dict[int, list] = {}

    def fac_list(g):
        fl = factors.get(g)
        if fl is None:
            fl = factors[g] = [1.0] * (n_cls + 1)
        return fl

    lag = model.max_gop_offset // T + 2
    disc = 1.0
    prev_phase = prev_h = None
    for t in range(slots):
        phase = t % T
        P = phases[phase]
        h = path[t]
        g0 = t // T
        n = len(x)
        if interdep:
            pis = [fac_list(g0 + off)[j] for j, off in zip(P.cls, P.gop_off)]
        else:
            pis = None
        y, ov = policy(phase, x, h, pis)
        if learner is not None and prev_phase is not None:
            learner.update(prev_phase, prev_h, x, h, getattr(policy, "last_order", None), y)
        met.overrides += ov

        # slot utility with the factors in force at decision time
        total = 0
        dist = 0.0
        if interdep:
            eff = list(pis)
            for a in range(n):
                if P.life[a] == 0 and P.dep_desc[a]:
                    p = math.exp(-decay_of[P.cls[a]] * (x[a] - y[a]))
                    for k in P.dep_desc[a]:
                        eff[k] *= p
            for i in range(n):
                total += y[i]
                dist += eff[i] * P.q[i] * y[i]
        else:
            for i in range(n):
                total += y[i]
                dist += P.q[i] * y[i]
        if check:
            for i in range(n):
                if not 0 <= y[i] <= x[i]:
                    met.accounting_violations += 1
            for i, k in P.pairs:
                if (x[i] - y[i]) * y[k]:
                    met.invariant_violations += 1
        en = cost[h][total]
        u = dist - lam * en
        met.distortion += dist
        met.energy += en
        met.utility += u
        met.discounted_utility += disc * u
        met.sent_packets += total
        if trace:
            met.trace.append(
                {"t": t, "phase": phase, "channel": h, "sent": total, "distortion": dist, "energy": en, "utility": u}
            )
        disc *= alpha

        # expiries: factor updates first so same-slot ancestors count
        succ = P.successor
        expiring = [i for i in range(n) if succ[i] < 0]
        if expiring:
            for i in expiring:
                z = x[i] - y[i]
                j = P.cls[i]
                if interdep and z and desc[j]:
                    fl = fac_list(g0 + P.gop_off[i])
                    p = math.exp(-decay_of[j] * z)
                    for k in desc[j]:
                        fl[k] *= p
            for i in expiring:
                z = x[i] - y[i]
                j = P.cls[i]
                g = g0 + P.gop_off[i]
                if check and sent[i] + y[i] + z != arrived[i]:
                    met.accounting_violations += 1
                met.expired_dus += 1
                met.residual_packets += z
                met.residual_by_class[j] += z
                if z:
                    met.missed_dus += 1
                    met.misses_by_class[j] += 1
                fin = fac_list(g)[j] if interdep else 1.0
                met.decoded_distortion += q_of[j] * (sent[i] + y[i]) * fin

        # advance to the next slot
        t1 = t + 1
        Pn = phases[t1 % T]
        g1 = t1 // T
        m = len(Pn.cls)
        nx_ = [0] * m
        ns = [0] * m
        na = [0] * m
        for i in range(n):
            s = succ[i]
            if s >= 0:
                nx_[s] = x[i] - y[i]
                ns[s] = sent[i] + y[i]
                na[s] = arrived[i]
        for k in P.arriving:
            j = Pn.cls[k]
            l = sizes.size(g1 + Pn.gop_off[k], j)
            nx_[k] = na[k] = l
            if t1 < slots:
                # only arrivals into slots that actually run are counted
                met.arrived_packets += l
                met.arrived_impact += q_of[j] * l
        if check and any(v < 0 for v in nx_):
            met.accounting_violations += 1
        x, sent, arrived = nx_, ns, na
        if phase == T - 1:
            # no DU of a GOP older than this can still be live or arriving
            sizes.forget_before(g1 - lag)
            if interdep:
                for g in [g for g in factors if g < g1 - lag]:
                    del factors[g]
        prev_phase, prev_h = phase, h
    met.slots = slots
    return met


# ---------------------------------------------------------------- experiments

CSV_VERSION = 1
CSV_COLUMNS = [
    "run",
    "policy",
    "lambda",
    "alpha",
    "window",
    "seed",
    "episodes",
    "slots",
    "distortion",
    "energy",
    "utility",
    "mean_utility",
    "discounted_utility",
    "decoded_distortion",
    "arrived_packets",
    "sent_packets",
    "residual_packets",
    "expired_dus",
    "missed_dus",
    "invariant_violations",
    "accounting_violations",
    "overrides",
    "instance",
]
_AVERAGED = (
    "distortion", "energy", "utility", "discounted_utility", "decoded_distortion", "arrived_packets",
    "arrived_impact", "sent_packets", "residual_packets", "expired_dus", "missed_dus",
)
_SUMMED = ("invariant_violations", "accounting_violations", "overrides")


def mean_metrics(runs: list) -> Metrics:
    """Per-episode average of the additive quantities; violation counts are totals."""
    out = Metrics()
    k = len(runs)
    out.slots = runs[0].slots
    for f in _AVERAGED:
        setattr(out, f, sum(getattr(r, f) for r in runs) / k)
    for f in _SUMMED:
        setattr(out, f, sum(getattr(r, f) for r in runs))
    for f in ("residual_by_class", "misses_by_class"):
        keys = runs[0].__dict__[f].keys()
        setattr(out, f, {c: sum(getattr(r, f)[c] for r in runs) / k for c in keys})
    return out


def episode_seeds(seed: int, episodes: int) -> list:
    return [seed] if episodes == 1 else [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(episodes)]


def make_policy(name: str, cfg, model: SchedulingModel, tables: ValueTable | None = None, solution=None):
    if name == "proposed":
        return ProposedPolicy(model, tables if tables is not None else ValueTable.zeros(model))
    if name == "oracle":
        if solution is None:
            from .oracle import joint_value_iteration

            solution = joint_value_iteration(model, cfg.oracle.tolerance, state_cap=cfg.oracle.state_cap)
        return OraclePolicy(solution)
    b = cfg.baselines
    return BaselineRunner(model, BaselinePolicy(name, model.lam, b.avg_gain, b.rd_cost, b.edf_budget))


def train(cfg, model: SchedulingModel | None = None, tables: ValueTable | None = None, slots: int | None = None):
    """Learning episode on ``cfg.seed``; returns the updated tables and its metrics."""
    model = model or cfg.model()
    tables = tables if tables is not None else ValueTable.zeros(model)
    lc = cfg.learning
    learner = Learner(model, tables, StepSchedule(lc.schedule, lc.beta), lc.load_rule)
    n = lc.train_slots if slots is None else slots
    met = simulate(model, ProposedPolicy(model, tables), n, cfg.seed, learner=learner)
    return tables, met


def evaluate(cfg, model, policy, episodes: int | None = None, seed: int | None = None, slots: int | None = None, trace=False) -> Metrics:
    episodes = cfg.evaluation.episodes if episodes is None else episodes
    seed = cfg.eval_seed if seed is None else seed
    slots = cfg.slots if slots is None else slots
    runs = [simulate(model, policy, slots, s, trace=trace) for s in episode_seeds(seed, episodes)]
    return runs[0] if len(runs) == 1 else mean_metrics(runs)


def run_episode(cfg, tables: ValueTable | None = None) -> Metrics:
    """One episode of ``cfg.policy`` on ``cfg.seed``; the proposed policy learns online
    when learning is enabled."""
    model = cfg.model()
    if cfg.policy == "proposed" and cfg.learning.enabled:
        tables = tables if tables is not None else ValueTable.zeros(model)
        lc = cfg.learning
        learner = Learner(model, tables, StepSchedule(lc.schedule, lc.beta), lc.load_rule)
        return simulate(model, ProposedPolicy(model, tables), cfg.slots, cfg.seed, learner=learner, trace=cfg.output.trace)
    policy = make_policy(cfg.policy, cfg, model, tables)
    return simulate(model, policy, cfg.slots, cfg.seed, trace=cfg.output.trace)


def train_then_eval(cfg, tables: ValueTable | None = None):
    model = cfg.model()
    tables, _ = train(cfg, model, tables)
    if cfg.output.tables:
        tables.save(cfg.output.tables, cfg.instance_hash())
    met = evaluate(cfg, model, ProposedPolicy(model, tables))
    return tables, met


def _record(run, name, cfg, lam, met: Metrics, inst) -> dict:
    row = {
        "run": run,
        "policy": name,
        "lambda": lam,
        "alpha": cfg.alpha,
        "window": cfg.gop.stw_W,
        "seed": cfg.eval_seed,
        "episodes": cfg.evaluation.episodes,
        "instance": inst,
    }
    s = met.summary()
    for c in CSV_COLUMNS:
        if c not in row:
            row[c] = s[c]
    return row


def compare_policies(cfg, policies, tables: ValueTable | None = None, lam: float | None = None):
    """Every policy on the same evaluation seeds; the proposed policy is trained
    first (on ``cfg.seed``) unless tables are supplied. Returns (rows, winner)."""
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    c = cfg if lam is None else cfg.with_(lam=lam)
    model = c.model()
    if "proposed" in policies and tables is None:
        tables, _ = train(c, model)
    rows = []
    for k, name in enumerate(policies):
        met = evaluate(c, model, make_policy(name, c, model, tables))
        rows.append(_record(k, name, c, c.lam, met, c.instance_hash()))
    winner = max(rows, key=lambda r: r["discounted_utility"])["policy"]
    return rows, winner


def sweep_lambda(cfg, lambdas, policies=("proposed",)):
    lambdas = [float(v) for v in lambdas]
    if not lambdas:
        raise ValueError("empty lambda list")
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda values must be strictly increasing")
    rows = []
    run = 0
    for lam in lambdas:
        c = cfg.with_(lam=lam)
        model = c.model()
        for name in policies:
            tables = train(c, model)[0] if name == "proposed" else None
            met = evaluate(c, model, make_policy(name, c, model, tables))
            rows.append(_record(run, name, c, lam, met, c.instance_hash()))
            run += 1
    return rows


def write_csv(rows, path, instance: str = "") -> None:
    import csv

    with open(path, "w", newline="") as fh:
        fh.write(f"# dusched-results v{CSV_VERSION} instance={instance}\n")
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list:
    import csv

    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# dusched-results"):
            raise ValueError("not a results file")
        return list(csv.DictReader(fh))
