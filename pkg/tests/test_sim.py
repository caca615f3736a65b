from functools import lru_cache

import numpy as np
import pytest

from dusched.config import EvalConfig, ExperimentConfig, LearningConfig, OutputConfig, tiny1_channel, tiny1_gop
from dusched.oracle import joint_value_iteration, per_du_projection
from dusched.scheduler import ValueTable
from dusched.sim import (
    CSV_COLUMNS,
    BaselineRunner,
    OraclePolicy,
    ProposedPolicy,
    compare_policies,
    evaluate,
    read_csv,
    run_episode,
    simulate,
    sweep_lambda,
    train,
    train_then_eval,
    write_csv,
)
from dusched.baselines import BaselinePolicy


def tiny_cfg(**kw):
    base = dict(lam=0.1, alpha=0.95, slots=2000, seed=1, learning=LearningConfig(train_slots=20_000))
    base.update(kw)
    return ExperimentConfig(tiny1_gop(), tiny1_channel(), **base)


@lru_cache(maxsize=None)
def trained_tiny1():
    cfg = tiny_cfg(learning=LearningConfig(train_slots=100_000))
    model = cfg.model()
    return cfg, model, train(cfg, model)[0]


def test_zero_slot_episode():
    met = run_episode(tiny_cfg(slots=0))
    assert met.slots == 0 and met.utility == 0.0 and met.energy == 0.0 and met.sent_packets == 0
    assert met.arrived_packets == 0 and met.arrived_impact == 0.0


def test_trace_accounting_identity():
    cfg = tiny_cfg(slots=3000, output=OutputConfig(trace=True))
    met = run_episode(cfg)
    disc = sum(cfg.alpha ** r["t"] * (r["distortion"] - cfg.lam * r["energy"]) for r in met.trace)
    assert met.discounted_utility == pytest.approx(disc, abs=1e-9)
    assert met.utility == pytest.approx(sum(r["utility"] for r in met.trace), abs=1e-9)
    assert met.invariant_violations == 0 and met.accounting_violations == 0


def test_metric_bounds():
    met = run_episode(tiny_cfg(slots=5000))
    assert met.energy >= 0
    assert met.distortion <= met.arrived_impact + 1e-9
    assert met.sent_packets + met.residual_packets <= met.arrived_packets


def test_lambda_zero_full_delivery():
    cfg = tiny_cfg(lam=0.0, policy="myopic")
    met = run_episode(cfg)
    assert met.distortion == pytest.approx(met.arrived_impact)
    assert met.residual_packets == 0 and met.missed_dus == 0


def test_reproducible_metrics_and_csv(tmp_path):
    cfg = tiny_cfg()
    a, b = run_episode(cfg), run_episode(cfg)
    assert a.summary() == b.summary()
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    rows, _ = compare_policies(cfg, ["myopic", "edf"])
    write_csv(rows, pa, cfg.instance_hash())
    rows, _ = compare_policies(cfg, ["myopic", "edf"])
    write_csv(rows, pb, cfg.instance_hash())
    assert pa.read_bytes() == pb.read_bytes()


def test_csv_header_and_columns(tmp_path):
    cfg = tiny_cfg()
    rows, _ = compare_policies(cfg, ["myopic", "rd_const"])
    path = tmp_path / "r.csv"
    write_csv(rows, path, cfg.instance_hash())
    first = path.read_text().splitlines()[0]
    assert first == f"# dusched-results v1 instance={cfg.instance_hash()}"
    back = read_csv(path)
    assert [r["policy"] for r in back] == ["myopic", "rd_const"]
    assert list(back[0]) == CSV_COLUMNS


def test_common_random_numbers_identical_rows():
    rows, _ = compare_policies(tiny_cfg(), ["myopic", "myopic"])
    a, b = (dict(r) for r in rows)
    a.pop("run"), b.pop("run")
    assert a == b


def test_policies_see_same_arrivals():
    cfg = tiny_cfg(slots=4000)
    model = cfg.model()
    mets = [evaluate(cfg, model, BaselineRunner(model, BaselinePolicy(k, cfg.lam))) for k in ("myopic", "rd_const", "edf")]
    assert len({m.arrived_packets for m in mets}) == 1
    assert len({round(m.arrived_impact, 9) for m in mets}) == 1


def test_alpha_zero_proposed_equals_myopic():
    cfg = tiny_cfg(alpha=0.0)
    rows, _ = compare_policies(cfg, ["proposed", "myopic"])
    assert rows[0]["discounted_utility"] == pytest.approx(rows[1]["discounted_utility"], abs=1e-9)
    assert rows[0]["utility"] == pytest.approx(rows[1]["utility"], abs=1e-9)


def test_untrained_tables_equal_myopic():
    cfg = tiny_cfg(learning=LearningConfig(train_slots=0))
    tables, met = train_then_eval(cfg)
    assert all(np.all(v == 0) for v in tables.values)
    model = cfg.model()
    my = evaluate(cfg, model, BaselineRunner(model, BaselinePolicy("myopic", cfg.lam)))
    assert met.summary() == my.summary()


def test_sweep_single_lambda_equals_run_episode():
    cfg = tiny_cfg(policy="myopic", evaluation=EvalConfig(seed=1))
    (row,) = sweep_lambda(cfg, [cfg.lam], ["myopic"])
    met = run_episode(cfg)
    assert row["utility"] == met.utility and row["energy"] == met.energy


def test_sweep_requires_increasing_lambdas():
    with pytest.raises(ValueError):
        sweep_lambda(tiny_cfg(), [0.1, 0.1])
    with pytest.raises(ValueError):
        sweep_lambda(tiny_cfg(), [])


def test_sweep_tiny1_energy_nonincreasing():
    rows = sweep_lambda(tiny_cfg(slots=5000), [0.01, 0.1, 1.0, 10.0], ["proposed"])
    e = [r["energy"] for r in rows]
    assert all(b <= a for a, b in zip(e, e[1:]))


def test_huge_lambda_no_energy():
    (row,) = sweep_lambda(tiny_cfg(), [1e6], ["proposed", "myopic"])[:1]
    assert row["energy"] == 0.0


def test_oracle_initialized_tables_near_oracle():
    cfg = tiny_cfg()
    m = cfg.model()
    sol = joint_value_iteration(m)
    a = simulate(m, ProposedPolicy(m, per_du_projection(sol)), 10_000, 4).mean_utility
    b = simulate(m, OraclePolicy(sol), 10_000, 4).mean_utility
    assert abs(a - b) <= 0.02 * abs(b)


def test_trained_policy_near_oracle():
    cfg, m, tables = trained_tiny1()
    a = simulate(m, ProposedPolicy(m, tables), 100_000, 5).mean_utility
    b = simulate(m, OraclePolicy(joint_value_iteration(m)), 100_000, 5).mean_utility
    assert abs(a - b) <= 0.05 * abs(b)


def test_tiny1_proposed_discounted_not_below_myopic():
    cfg, m, tables = trained_tiny1()
    c = cfg.with_(slots=200, evaluation=EvalConfig(episodes=1000))
    rows, _ = compare_policies(c, ["proposed", "myopic"], tables)
    assert rows[0]["discounted_utility"] >= rows[1]["discounted_utility"]


def test_retraining_at_fixed_point_barely_moves(tmp_path):
    cfg = tiny_cfg(learning=LearningConfig(train_slots=500_000))
    m = cfg.model()
    tables, _ = train(cfg, m)
    path = tmp_path / "t.csv"
    tables.save(path, cfg.instance_hash())
    resumed = ValueTable.load(path, m.gop, m.n_channel, cfg.instance_hash())
    train(cfg.with_(seed=99), m, resumed, 10_000)
    assert resumed.sup_distance(tables) < 1e-3


def test_interdependent_episode_runs_clean():
    cfg = tiny_cfg(mode="interdependent", slots=5000)
    met = run_episode(cfg)
    assert met.invariant_violations == 0 and met.accounting_violations == 0
    assert met.decoded_distortion <= met.distortion + 1e-9
