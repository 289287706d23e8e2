"""Budget-sweep orchestration: artifact building, evaluation cells,
box-plot aggregation, and deterministic CSV/JSON export.

Everything downstream of the config and its seed is deterministic; exports
are written atomically and byte-stable so repeated runs can be diffed.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffusion, envs, guide, planner, trajectory
from .errors import ConfigError

METRICS = ("normalized_cost", "reward")


@dataclass
class ExperimentConfig:
    """One declarative description of a full experiment."""

    env_id: str = "reachavoid"
    seed: int = 0
    behavior: str = "waypoint"
    behavior_episodes: int = 500
    # Planning window, kept shorter than the episode so replanning mid-episode
    # conditions the model on window starts it actually saw during training.
    horizon: int = 16
    chain_steps: int = 64
    denoiser_hidden: tuple = (256, 256)
    guide_hidden: tuple = (128, 128)
    diffusion_train_steps: int = 20000
    guide_train_steps: int = 15000
    batch_size: int = 64
    lr: float = 1e-3
    candidates: int = 16
    replan_interval: int = 1
    alpha: float = 0.1
    penalty: float = 100.0
    budget_ratios: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    episodes_per_cell: int = 60
    eval_seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        for name in ("denoiser_hidden", "guide_hidden", "budget_ratios", "eval_seeds"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.env_id.startswith("gridbudget") and self.behavior == "waypoint":
            self.behavior = "epsilon-greedy"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


def default_config(env_id: str, **overrides) -> ExperimentConfig:
    base = {"env_id": env_id}
    if env_id.startswith("gridbudget"):
        base.update(behavior="epsilon-greedy", horizon=4,
                    denoiser_hidden=(128, 128), guide_hidden=(64, 64),
                    diffusion_train_steps=8000, guide_train_steps=6000)
    base.update(overrides)
    return ExperimentConfig(**base)


@dataclass
class Artifacts:
    """Everything a planner needs, built once per config."""

    model: diffusion.DiffusionModel
    guides: guide.GuidePair
    dataset: envs.Dataset


def build_artifacts(cfg: ExperimentConfig, progress=None) -> Artifacts:
    """collect -> window -> train diffusion -> train guides, all seeded."""
    seeds = np.random.SeedSequence([cfg.seed, 0xA11]).spawn(3)
    env = envs.make_env(cfg.env_id)
    beh = envs.make_behavior(env, cfg.behavior)
    ds = envs.collect(env, beh, cfg.behavior_episodes,
                      np.random.default_rng(seeds[0]), behavior=cfg.behavior)
    ws = trajectory.make_windows(ds, env.spec, cfg.horizon)
    sd = ws.obs.shape[2]
    ad = ws.acts.shape[2]
    # Model coordinates: states as (first state, stepwise offsets), then
    # normalization per flattened coordinate so the absolute first row and
    # the small offset rows each own their range. Keeps generated windows
    # continuous: a decoded step can never exceed the largest step in data.
    enc = trajectory.to_step_offsets(
        np.concatenate([ws.obs, ws.acts], axis=2), sd)
    flat = enc.reshape(len(ws), -1)
    norm = trajectory.Normalizer.fit(flat)
    x0 = norm.normalize(flat)
    model = diffusion.DiffusionModel.create(
        cfg.horizon, sd, ad, norm, np.random.default_rng(seeds[1]),
        hidden=cfg.denoiser_hidden, n_steps=cfg.chain_steps,
        env_spec_hash=env.spec.spec_hash())
    diffusion.train(model, x0, cfg.diffusion_train_steps,
                    np.random.default_rng(seeds[1]), batch_size=cfg.batch_size,
                    lr=cfg.lr)
    if progress:
        progress("diffusion trained")
    pair = guide.GuidePair.create(cfg.horizon, sd, ad,
                                  np.random.default_rng(seeds[2]),
                                  hidden=cfg.guide_hidden,
                                  env_spec_hash=env.spec.spec_hash())
    guide.train_guides(pair, model.schedule, x0, ws.reward_togo, ws.cost_togo,
                       cfg.guide_train_steps, np.random.default_rng(seeds[2]),
                       batch_size=cfg.batch_size, lr=cfg.lr)
    if progress:
        progress("guides trained")
    return Artifacts(model, pair, ds)


def check_artifacts(model: diffusion.DiffusionModel, guides: guide.GuidePair,
                    env) -> None:
    """Loaded checkpoints must belong to the same environment spec."""
    from .errors import CheckpointError
    h = env.spec.spec_hash()
    if model.env_spec_hash != h or guides.env_spec_hash != h:
        raise CheckpointError("artifact/environment spec hash mismatch")


# ---------------------------------------------------------------------------
# box statistics


@dataclass
class BoxStats:
    count: int
    mean: float
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: int


def box_stats(values) -> BoxStats:
    """Quartiles by linear interpolation; whiskers at the most extreme data
    points within 1.5 IQR of the quartiles; everything beyond is an outlier."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ConfigError("box_stats needs at least one value")
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    lo_lim, hi_lim = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_lim) & (v <= hi_lim)]
    w_lo, w_hi = float(inside[0]), float(inside[-1])
    outliers = int(v.size - inside.size)
    return BoxStats(int(v.size), float(v.mean()), float(med), float(q1),
                    float(q3), w_lo, w_hi, outliers)


# ---------------------------------------------------------------------------
# sweep


def _cell_rng(cfg_seed: int, kind: str, ratio_idx: int, eval_seed: int):
    code = {"budget": 1, "unconstrained": 2, "behavior": 3}[kind]
    return np.random.default_rng(
        np.random.SeedSequence([cfg_seed, code, ratio_idx, eval_seed]))


def _run_cell(env_id, model, guides, budget, pcfg, rng, episodes):
    env = envs.make_env(env_id)
    return [planner.run_episode(env, model, guides, budget, pcfg, rng)
            for _ in range(episodes)]


@dataclass
class SweepResult:
    config: ExperimentConfig
    b_max: float
    rows: list = field(default_factory=list)        # per-episode dicts
    box_rows: list = field(default_factory=list)    # aggregated dicts
    baseline_violation: dict = field(default_factory=dict)  # ratio -> rate
    planner_violation: dict = field(default_factory=dict)


def run_sweep(cfg: ExperimentConfig, artifacts: Artifacts, out_dir,
              progress=None) -> SweepResult:
    """Baseline calibration plus the full (ratio x seed) grid of planner cells.

    The unconstrained baseline ignores budgets, so its cells run once per
    eval seed and are scored against every ratio afterwards. b_max is the
    mean episodic cost of the first seed's baseline cell.
    """
    os.makedirs(out_dir, exist_ok=True)
    env_id = cfg.env_id
    base_pcfg = planner.PlannerConfig(cfg.candidates, cfg.replan_interval,
                                      cfg.alpha, cfg.penalty, "unconstrained")
    plan_pcfg = planner.PlannerConfig(cfg.candidates, cfg.replan_interval,
                                      cfg.alpha, cfg.penalty, "budget")

    baseline: dict[int, list] = {}
    for es in cfg.eval_seeds:
        rng = _cell_rng(cfg.seed, "unconstrained", 0, es)
        baseline[es] = _run_cell(env_id, artifacts.model, artifacts.guides,
                                 float("inf"), base_pcfg, rng,
                                 cfg.episodes_per_cell)
        if progress:
            progress(f"baseline seed {es} done")
    b_max = float(np.mean([r.ep_cost for r in baseline[cfg.eval_seeds[0]]]))

    registry = {"env": env_id, "b_max": b_max,
                "episodes": cfg.episodes_per_cell, "seed": cfg.eval_seeds[0]}
    _atomic_write(os.path.join(out_dir, "registry.json"),
                  json.dumps(registry, sort_keys=True, indent=1))

    result = SweepResult(cfg, b_max)
    steps_path = os.path.join(out_dir, "steps.jsonl")
    step_buf = io.StringIO()

    for ridx, ratio in enumerate(cfg.budget_ratios):
        budget = ratio * b_max
        cell_results = []
        for es in cfg.eval_seeds:
            rng = _cell_rng(cfg.seed, "budget", ridx, es)
            eps = _run_cell(env_id, artifacts.model, artifacts.guides,
                            budget, plan_pcfg, rng, cfg.episodes_per_cell)
            cell_results.extend((es, r) for r in eps)
            if progress:
                progress(f"ratio {ratio} seed {es} done")
        for ei, (es, r) in enumerate(cell_results):
            result.rows.append({
                "env": env_id, "kind": "budget", "ratio": ratio,
                "budget": budget, "seed": es, "episode": ei,
                "ep_return": r.ep_return, "ep_cost": r.ep_cost,
                "normalized_cost": r.ep_cost / budget if budget > 0 else float("nan"),
                "violation": int(r.violation),
                "fallback_steps": r.fallback_steps,
            })
            for sl in r.steps:
                step_buf.write(_step_json(env_id, ratio, es, ei, budget, sl))
        vr = float(np.mean([int(r.violation) for _, r in cell_results]))
        result.planner_violation[ratio] = vr

        costs = [r.ep_cost / budget for _, r in cell_results]
        rewards = [r.ep_return for _, r in cell_results]
        for metric, vals in (("normalized_cost", costs), ("reward", rewards)):
            bs = box_stats(vals)
            result.box_rows.append({
                "env": env_id, "budget": budget, "ratio": ratio,
                "metric": metric, **asdict(bs),
                "seed_set": ";".join(str(s) for s in cfg.eval_seeds),
                "config_hash": cfg.config_hash(),
            })

    # score baseline violations against each ratio; also log its episodes
    for ridx, ratio in enumerate(cfg.budget_ratios):
        budget = ratio * b_max
        flags = [int(r.ep_cost > budget)
                 for es in cfg.eval_seeds for r in baseline[es]]
        result.baseline_violation[ratio] = float(np.mean(flags))
    for es in cfg.eval_seeds:
        for ei, r in enumerate(baseline[es]):
            result.rows.append({
                "env": env_id, "kind": "unconstrained", "ratio": float("nan"),
                "budget": float("nan"), "seed": es, "episode": ei,
                "ep_return": r.ep_return, "ep_cost": r.ep_cost,
                "normalized_cost": float("nan"), "violation": 0,
                "fallback_steps": r.fallback_steps,
            })
            for sl in r.steps:
                step_buf.write(_step_json(env_id, float("nan"), es, ei,
                                          float("nan"), sl))

    _atomic_write(steps_path, step_buf.getvalue())
    export_boxstats_csv(result, os.path.join(out_dir, "boxstats.csv"))
    export_episodes_csv(result, os.path.join(out_dir, "episodes.csv"))
    export_summary_json(result, os.path.join(out_dir, "summary.json"))
    return result


def _step_json(env_id, ratio, seed, episode, budget, sl: planner.StepLog) -> str:
    def clean(x):
        return None if (isinstance(x, float) and not np.isfinite(x)) else x
    rec = {"env": env_id, "ratio": clean(ratio), "seed": seed, "episode": episode,
           "budget": clean(budget), "t": sl.t,
           "remaining_budget": clean(sl.remaining_budget),
           "est_reward": clean(sl.est_reward), "est_cost": clean(sl.est_cost),
           "fallback": int(sl.fallback), "reward": sl.reward, "cost": sl.cost}
    return json.dumps(rec, sort_keys=True) + "\n"


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(fieldnames, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


BOX_FIELDS = ["env", "budget", "ratio", "metric", "count", "mean", "median",
              "q1", "q3", "whisker_lo", "whisker_hi", "outliers", "seed_set",
              "config_hash"]

EPISODE_FIELDS = ["env", "kind", "ratio", "budget", "seed", "episode",
                  "ep_return", "ep_cost", "normalized_cost", "violation",
                  "fallback_steps"]


def export_boxstats_csv(result: SweepResult, path) -> None:
    _atomic_write(path, _csv_text(BOX_FIELDS, result.box_rows))


def export_episodes_csv(result: SweepResult, path) -> None:
    _atomic_write(path, _csv_text(EPISODE_FIELDS, result.rows))


def export_summary_json(result: SweepResult, path) -> None:
    payload = {
        "config": json.loads(result.config.to_json()),
        "config_hash": result.config.config_hash(),
        "b_max": result.b_max,
        "planner_violation": {str(k): v for k, v in result.planner_violation.items()},
        "baseline_violation": {str(k): v for k, v in result.baseline_violation.items()},
        "box_rows": result.box_rows,
    }
    _atomic_write(path, json.dumps(payload, sort_keys=True, indent=1))


def load_boxstats_csv(path) -> list[dict]:
    """Round-trip reader for the boxstats export (strings back to numbers)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = dict(row)
            for k in ("budget", "ratio", "mean", "median", "q1", "q3",
                      "whisker_lo", "whisker_hi"):
                parsed[k] = float(row[k])
            for k in ("count", "outliers"):
                parsed[k] = int(row[k])
            out.append(parsed)
    return out
