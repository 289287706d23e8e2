"""Command-line entry points.

Subcommands: collect | train | plan | sweep | oracle | report. Every command
resolves one declarative config (defaults, then --config file, then explicit
flags) so runs are reproducible from the printed config hash.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import diffusion, envs, guide, harness, oracle, planner
from .errors import ConfigError


def _parse_floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _parse_ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--env", dest="env_id", help="environment id")
    p.add_argument("--seed", type=int, help="top-level seed")
    p.add_argument("--episodes", type=int, help="episodes per evaluation cell")
    p.add_argument("--seeds", help="comma-separated evaluation seeds")
    p.add_argument("--budget-ratios", help="comma-separated budget ratios")
    p.add_argument("--candidates", type=int, help="candidate trajectories per plan")
    p.add_argument("--alpha", type=float, help="guidance strength")
    p.add_argument("--n", type=float, dest="penalty", help="overspend penalty slope")
    p.add_argument("--replan-interval", type=int, help="steps between replans")


def _resolve_config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg_dict = json.load(open(args.config))
    else:
        cfg_dict = {}
    if args.env_id:
        cfg_dict["env_id"] = args.env_id
    env_id = cfg_dict.get("env_id", "reachavoid")
    base = harness.default_config(env_id)
    merged = {**base.__dict__, **cfg_dict}
    for flag, key in (("seed", "seed"), ("episodes", "episodes_per_cell"),
                      ("candidates", "candidates"), ("alpha", "alpha"),
                      ("penalty", "penalty"),
                      ("replan_interval", "replan_interval")):
        v = getattr(args, flag, None)
        if v is not None:
            merged[key] = v
    if getattr(args, "seeds", None):
        merged["eval_seeds"] = _parse_ints(args.seeds)
    if getattr(args, "budget_ratios", None):
        merged["budget_ratios"] = _parse_floats(args.budget_ratios)
    return harness.ExperimentConfig.from_dict(merged)


def cmd_collect(args) -> int:
    cfg = _resolve_config(args)
    env = envs.make_env(cfg.env_id)
    beh = envs.make_behavior(env, cfg.behavior)
    n = args.episodes or cfg.behavior_episodes
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11, 0]))
    ds = envs.collect(env, beh, n, rng, behavior=cfg.behavior)
    envs.save_dataset(ds, args.out)
    print(f"wrote {n} episodes to {args.out} (env {cfg.env_id}, "
          f"spec {env.spec.spec_hash()})")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    art = harness.build_artifacts(cfg, progress=lambda m: print(m, flush=True))
    diffusion.save_model(art.model, args.out_model)
    guide.save_guides(art.guides, args.out_guides)
    print(f"config {cfg.config_hash()}: model -> {args.out_model}, "
          f"guides -> {args.out_guides}")
    return 0


def cmd_plan(args) -> int:
    cfg = _resolve_config(args)
    env = envs.make_env(cfg.env_id)
    model = diffusion.load_model(args.model)
    guides = guide.load_guides(args.guides)
    harness.check_artifacts(model, guides, env)
    if env.spec.discrete:
        state = int(args.state)
    else:
        state = np.array(_parse_floats(args.state))
    budget = float("inf") if args.budget in (None, "inf") else float(args.budget)
    pcfg = planner.PlannerConfig(cfg.candidates, cfg.replan_interval,
                                 cfg.alpha, cfg.penalty,
                                 "unconstrained" if budget == float("inf") else "budget")
    enc_state = state
    if env.spec.discrete:
        from .trajectory import state_to_vec
        enc_state = state_to_vec(env.spec, state)
    rng = np.random.default_rng(cfg.seed)
    traj, info = planner.plan(model, guides, enc_state, budget, pcfg, rng)
    payload = {
        "est_reward": info.est_reward, "est_cost": info.est_cost,
        "fallback": info.fallback,
        "states": traj.states.tolist(), "actions": traj.actions.tolist(),
    }
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.out:
        harness._atomic_write(args.out, text)
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    print(f"sweep config {cfg.config_hash()}: {cfg.env_id}, "
          f"ratios {cfg.budget_ratios}, {cfg.episodes_per_cell} episodes x "
          f"{len(cfg.eval_seeds)} seeds", flush=True)
    if args.model and args.guides:
        env = envs.make_env(cfg.env_id)
        model = diffusion.load_model(args.model)
        guides = guide.load_guides(args.guides)
        harness.check_artifacts(model, guides, env)
        ds = envs.load_dataset(args.data) if args.data else None
        art = harness.Artifacts(model, guides, ds)
    else:
        art = harness.build_artifacts(cfg, progress=lambda m: print(m, flush=True))
    res = harness.run_sweep(cfg, art, args.out,
                            progress=lambda m: print(m, flush=True))
    print(f"b_max {res.b_max:.6g}; exports in {args.out}")
    for ratio in cfg.budget_ratios:
        print(f"  ratio {ratio}: violation {res.planner_violation[ratio]:.3f} "
              f"(baseline {res.baseline_violation[ratio]:.3f})")
    return 0


def cmd_oracle(args) -> int:
    env = envs.make_env(args.env_id or "gridbudget")
    beh = envs.make_behavior(env, "epsilon-greedy")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    ds = envs.collect(env, beh, args.episodes or 500, rng, behavior="epsilon-greedy")
    if args.budgets:
        budgets = _parse_floats(args.budgets)
    else:
        max_cost = float(ds.episodic_cost(env.spec.gamma).max())
        budgets = tuple(r * max_cost for r in (0.25, 0.5, 0.75, 1.0))
    report = oracle.oracle_report(env, ds, budgets, args.alpha or 0.1)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        harness._atomic_write(args.out, text)
    else:
        print(text)
    return 0


def cmd_report(args) -> int:
    import csv as _csv
    with open(args.episodes_csv, newline="") as fh:
        rows = [r for r in _csv.DictReader(fh)]
    budget_rows = [r for r in rows if r["kind"] == "budget"]
    if not budget_rows:
        raise ConfigError("no planner episodes in the file")
    ratios = sorted({float(r["ratio"]) for r in budget_rows})
    box_rows = []
    for ratio in ratios:
        cell = [r for r in budget_rows if float(r["ratio"]) == ratio]
        budget = float(cell[0]["budget"])
        seed_set = ";".join(str(s) for s in sorted({int(r["seed"]) for r in cell}))
        for metric, key in (("normalized_cost", "normalized_cost"),
                            ("reward", "ep_return")):
            bs = harness.box_stats([float(r[key]) for r in cell])
            box_rows.append({"env": cell[0]["env"], "budget": budget,
                             "ratio": ratio, "metric": metric,
                             **bs.__dict__, "seed_set": seed_set,
                             "config_hash": args.config_hash or ""})
            print(f"{cell[0]['env']} ratio {ratio} {metric}: "
                  f"median {bs.median:.4g} [q1 {bs.q1:.4g}, q3 {bs.q3:.4g}] "
                  f"mean {bs.mean:.4g} ({bs.count} episodes, {bs.outliers} outliers)")
    if args.out:
        harness._atomic_write(args.out, harness._csv_text(harness.BOX_FIELDS, box_rows))
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="budgetplan",
        description="Budget-constrained trajectory planning experiments")
    sub = p.add_subparsers(dest="cmd", required=True)

    pc = sub.add_parser("collect", help="roll out a behavior policy to a dataset")
    _add_config_flags(pc)
    pc.add_argument("--out", required=True)
    pc.set_defaults(fn=cmd_collect)

    pt = sub.add_parser("train", help="train diffusion model and guide heads")
    _add_config_flags(pt)
    pt.add_argument("--out-model", required=True)
    pt.add_argument("--out-guides", required=True)
    pt.set_defaults(fn=cmd_train)

    pp = sub.add_parser("plan", help="one planning call from a given state")
    _add_config_flags(pp)
    pp.add_argument("--model", required=True)
    pp.add_argument("--guides", required=True)
    pp.add_argument("--state", required=True,
                    help="comma-separated coordinates, or a state index")
    pp.add_argument("--budget", help="remaining budget, or 'inf'")
    pp.add_argument("--out")
    pp.set_defaults(fn=cmd_plan)

    ps = sub.add_parser("sweep", help="full budget-ratio evaluation grid")
    _add_config_flags(ps)
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--model", help="reuse a trained model checkpoint")
    ps.add_argument("--guides", help="reuse trained guide checkpoints")
    ps.add_argument("--data", help="dataset npz (with --model/--guides)")
    ps.set_defaults(fn=cmd_sweep)

    po = sub.add_parser("oracle", help="exact analysis of a discrete instance")
    po.add_argument("--env", dest="env_id", default="gridbudget")
    po.add_argument("--episodes", type=int, default=500)
    po.add_argument("--seed", type=int, default=0)
    po.add_argument("--alpha", type=float, default=0.1)
    po.add_argument("--budgets", help="comma-separated absolute budgets")
    po.add_argument("--out")
    po.set_defaults(fn=cmd_oracle)

    pr = sub.add_parser("report", help="recompute box stats from episode exports")
    pr.add_argument("--episodes-csv", required=True)
    pr.add_argument("--out")
    pr.add_argument("--config-hash", default="")
    pr.set_defaults(fn=cmd_report)

    args = p.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
