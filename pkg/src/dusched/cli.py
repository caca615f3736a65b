"""Command-line entry point: validate, run, sweep, compare, train, eval, oracle."""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .scheduler import ValueTable
from .sim import (
    POLICIES,
    compare_policies,
    evaluate,
    make_policy,
    run_episode,
    sweep_lambda,
    train,
    write_csv,
    _record,
)
from .traffic import validate_gop


def _print_rows(rows, keys=("policy", "lambda", "distortion", "energy", "discounted_utility", "mean_utility")):
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def cmd_validate(args, cfg):
    rep = validate_gop(cfg.gop)
    print(f"instance {cfg.instance_hash()}: {rep}")
    model = cfg.model()
    for ctx in model.contexts:
        mem = ", ".join(f"c{m.class_id}(g{m.gop_offset:+d},r{m.lifetime})" for m in ctx.members)
        print(f"phase {ctx.phase}: {mem}")
    return 0 if rep.ok else 1


def cmd_run(args, cfg):
    met = run_episode(cfg)
    row = _record(0, cfg.policy, cfg, cfg.lam, met, cfg.instance_hash())
    _print_rows([row])
    out = args.csv or cfg.output.csv
    if out:
        write_csv([row], out, cfg.instance_hash())
    return 0


def cmd_sweep(args, cfg):
    rows = sweep_lambda(cfg, args.lambdas, args.policies or [cfg.policy])
    _print_rows(rows)
    out = args.csv or cfg.output.csv
    if out:
        write_csv(rows, out, cfg.instance_hash())
    return 0


def cmd_compare(args, cfg):
    rows, winner = compare_policies(cfg, args.policies)
    _print_rows(rows)
    print(f"winner by discounted utility: {winner}")
    out = args.csv or cfg.output.csv
    if out:
        write_csv(rows, out, cfg.instance_hash())
    return 0


def cmd_train(args, cfg):
    model = cfg.model()
    tables = None
    if args.resume:
        tables = ValueTable.load(args.resume, cfg.gop, model.n_channel, cfg.instance_hash())
    tables, met = train(cfg, model, tables, args.slots)
    tables.save(args.out, cfg.instance_hash())
    print(f"trained {met.slots} slots, mean utility {met.mean_utility:.6g}; tables written to {args.out}")
    return 0


def cmd_eval(args, cfg):
    model = cfg.model()
    tables = ValueTable.load(args.tables, cfg.gop, model.n_channel, cfg.instance_hash())
    met = evaluate(cfg, model, make_policy("proposed", cfg, model, tables))
    row = _record(0, "proposed", cfg, cfg.lam, met, cfg.instance_hash())
    _print_rows([row])
    out = args.csv or cfg.output.csv
    if out:
        write_csv([row], out, cfg.instance_hash())
    return 0


def cmd_oracle(args, cfg):
    from .oracle import StateSpaceTooLarge, joint_value_iteration, state_space_size

    model = cfg.model()
    try:
        sol = joint_value_iteration(model, cfg.oracle.tolerance, state_cap=cfg.oracle.state_cap)
    except StateSpaceTooLarge as e:
        print(f"refused: {e}", file=sys.stderr)
        return 2
    print(
        f"instance {cfg.instance_hash()}: {state_space_size(model)} states, "
        f"{sol.iterations} sweeps, Bellman residual {sol.residual:.3g}"
    )
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(f"# dusched-oracle v1 instance={cfg.instance_hash()}\n")
            fh.write("phase,channel,state,V,U\n")
            for tau, sp in enumerate(sol.spaces):
                for h in range(model.n_channel):
                    for s in range(sp.n_states):
                        digits = "-".join(str(int(v)) for v in sp.digits[s])
                        fh.write(f"{tau},{h},{digits},{float(sol.V[tau][h, s])!r},{float(sol.U[tau][h, s])!r}\n")
        print(f"fixture written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dusched", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="YAML experiment config")
        sp.set_defaults(fn=fn)
        return sp

    add("validate", cmd_validate, "check a config and print its context table")
    sp = add("run", cmd_run, "run one episode of the configured policy")
    sp.add_argument("--csv")
    sp = add("sweep", cmd_sweep, "distortion/energy frontier over lambda")
    sp.add_argument("--lambdas", type=float, nargs="+", required=True)
    sp.add_argument("--policies", nargs="+", choices=POLICIES)
    sp.add_argument("--csv")
    sp = add("compare", cmd_compare, "policies on common random numbers")
    sp.add_argument("--policies", nargs="+", choices=POLICIES, required=True)
    sp.add_argument("--csv")
    sp = add("train", cmd_train, "learn value tables and save them")
    sp.add_argument("--out", required=True)
    sp.add_argument("--slots", type=int)
    sp.add_argument("--resume", help="start from saved tables")
    sp = add("eval", cmd_eval, "evaluate saved tables with learning frozen")
    sp.add_argument("--tables", required=True)
    sp.add_argument("--csv")
    sp = add("oracle", cmd_oracle, "solve the joint problem exactly (small instances)")
    sp.add_argument("--out", help="write V/U fixture")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        return args.fn(args, cfg)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
