"""Task metrics, evaluation harnesses and the latent mutual-information study."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .agent import ExpertAgent, as_agent, rollout
from .config import FUSION_MODES, RunConfig, WorldConfig
from .mutual_info import DegenerateSamples, estimate_mi
from .parallel import parallel_map
from .seeding import derive_seed
from .training import PolicyCheckpoint, train
from .world import (LATCH_HIDDEN_FIELDS, POUR_HIDDEN_FIELDS, Episode, make_world,
                    shift_container)

CABINET_WEIGHTS = (0.3, 0.3, 0.4)

_FILL = POUR_HIDDEN_FIELDS.index("fill_level")
_SPILLED = POUR_HIDDEN_FIELDS.index("spilled")
_DOOR = LATCH_HIDDEN_FIELDS.index("door_position")
_DISP = LATCH_HIDDEN_FIELDS.index("base_displacement")
_ROT = LATCH_HIDDEN_FIELDS.index("base_rotation")


# --------------------------------------------------------------------------
# metrics


def _require_task(episode: Episode, task: str) -> None:
    if episode.task_id != task:
        raise ValueError(f"expected a {task} episode, got {episode.task_id!r}")


def pour_metric(episode: Episode) -> float:
    """Final air-column height in metres; a spill scores the full container height."""
    _require_task(episode, "pour")
    height = float(episode.container_params["height"])
    final = episode.final_hidden
    if final[_SPILLED]:
        return height
    return height * (1.0 - float(final[_FILL]))


def poured_amount(episode: Episode) -> float:
    """Fill fraction added during the episode."""
    _require_task(episode, "pour")
    return float(episode.final_hidden[_FILL] - episode.meta["initial_fill"])


def cabinet_score(d_slide: float, d_disp: float, theta_rot: float,
                  alpha: float = CABINET_WEIGHTS[0], beta: float = CABINET_WEIGHTS[1],
                  gamma: float = CABINET_WEIGHTS[2]) -> float:
    """Weighted sum of residual door travel, base displacement and base rotation."""
    values = (d_slide, d_disp, theta_rot)
    if any(not np.isfinite(v) or v < 0 for v in values):
        raise ValueError(f"measurements must be finite and non-negative, got {values}")
    return alpha * d_slide + beta * d_disp + gamma * theta_rot


def latch_score(episode: Episode) -> float:
    _require_task(episode, "latch")
    final = episode.final_hidden
    return cabinet_score(max(0.0, 1.0 - float(final[_DOOR])), float(final[_DISP]), float(final[_ROT]))


def episode_metric(episode: Episode) -> float:
    return pour_metric(episode) if episode.task_id == "pour" else latch_score(episode)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    method: str
    task: str
    values: list[float]
    mean: float
    std: float
    n_trials: int
    seeds: list[int]
    config_hash: str
    label: str = ""

    @classmethod
    def from_values(cls, method: str, task: str, values, seeds, config_hash: str,
                    label: str = "") -> "EvalReport":
        values = [float(v) for v in values]
        arr = np.asarray(values)
        return cls(method, task, values, float(arr.mean()), float(arr.std()), len(values),
                   [int(s) for s in seeds], config_hash, label)

    def check(self, tol: float = 1e-9) -> bool:
        arr = np.asarray(self.values)
        return (self.n_trials == len(self.values) and abs(arr.mean() - self.mean) <= tol
                and abs(arr.std() - self.std) <= tol)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def trial_seeds(base_seed: int, n_trials: int) -> list[int]:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    return [derive_seed(base_seed, "eval.trial", i) for i in range(n_trials)]


def _trial(args) -> float:
    agent, world_cfg, seed, n_a, exec_slice, max_steps = args
    world = make_world(world_cfg, seed)
    return episode_metric(rollout(agent, world, n_a, max_steps, seed, exec_slice).episode)


def run_eval(agent, world_cfg: WorldConfig, n_trials: int | None = None, seeds=None,
             method: str | None = None, n_a: int | None = None, exec_slice: str | None = None,
             max_steps: int | None = None, label: str = "") -> EvalReport:
    """Roll out ``agent`` once per seed and summarise the task metric (population std)."""
    agent = as_agent(agent)
    if seeds is None:
        seeds = trial_seeds(agent.cfg.eval.seed, n_trials or agent.cfg.eval.trials)
    seeds = [int(s) for s in seeds]
    if n_trials is not None and len(seeds) != n_trials:
        raise ValueError(f"{len(seeds)} seeds given for {n_trials} trials")
    if not seeds:
        raise ValueError("n_trials must be >= 1")
    if agent.task != world_cfg.task:
        raise ValueError(f"agent is for task {agent.task!r} but the world is {world_cfg.task!r}")
    steps = max_steps if max_steps is not None else (agent.cfg.eval.max_steps or None)
    values = parallel_map(_trial, [(agent, world_cfg, s, n_a, exec_slice, steps) for s in seeds])
    cfg_hash = RunConfig(world=world_cfg, pipeline=agent.cfg.pipeline, model=agent.cfg.model,
                         train=agent.cfg.train, eval=agent.cfg.eval, mi=agent.cfg.mi).digest()
    return EvalReport.from_values(method or agent.name, world_cfg.task, values, seeds, cfg_hash, label)


def expert_agent(cfg: RunConfig) -> ExpertAgent:
    return ExpertAgent(cfg)


# --------------------------------------------------------------------------
# suites


@dataclass
class AblationResult:
    reports: list[EvalReport]
    combined: list[EvalReport] = field(default_factory=list)
    checkpoints: dict[str, list[str]] = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        rows = self.combined or self.reports
        return {r.method: r.mean for r in rows}

    def ordering_flags(self) -> dict[str, bool]:
        """Pairwise ``hierarchical < mode`` flags (lower metric is better)."""
        means = self.means()
        if "hierarchical" not in means:
            return {}
        return {f"hierarchical<{m}": means["hierarchical"] < v for m, v in means.items()
                if m != "hierarchical"}


def ablation_suite(features, cfg: RunConfig, modes=FUSION_MODES, out_dir=None,
                   train_seeds=None, eval_seed: int | None = None,
                   n_trials: int | None = None) -> AblationResult:
    """Train one policy per fusion mode with shared hyperparameters and evaluate each.

    With several training seeds, ``combined`` pools trials across seeds so
    the spread covers both sources of variation.
    """
    modes = list(modes)
    bad = [m for m in modes if m not in FUSION_MODES]
    if bad:
        raise ValueError(f"unknown fusion modes {bad}")
    train_seeds = list(train_seeds) if train_seeds is not None else [cfg.train.seed]
    seeds = trial_seeds(cfg.eval.seed if eval_seed is None else eval_seed, n_trials or cfg.eval.trials)
    result = AblationResult(reports=[])
    for mode in modes:
        mode_cfg = cfg.with_(model={"fusion": mode})
        pooled, pooled_seeds = [], []
        for ts in train_seeds:
            run_dir = Path(out_dir) / f"{mode}_seed{ts}" if out_dir is not None else None
            trained = train(features, mode_cfg, ts, run_dir, mode=mode)
            if trained.checkpoint is not None:
                result.checkpoints.setdefault(mode, []).append(str(trained.checkpoint))
            ckpt = PolicyCheckpoint(mode_cfg, mode, mode_cfg.train.steps, trained.policy, trained.stats,
                                    {"task": cfg.world.task})
            report = run_eval(ckpt, cfg.world, seeds=seeds, method=mode, label=f"train_seed={ts}")
            result.reports.append(report)
            pooled += report.values
            pooled_seeds += report.seeds
        if len(train_seeds) > 1:
            result.combined.append(EvalReport.from_values(mode, cfg.world.task, pooled, pooled_seeds,
                                                          mode_cfg.digest(), "all_train_seeds"))
    return result


@dataclass
class GeneralizationRow:
    variant: int
    report: EvalReport
    degradation: float


def generalization_suite(agent, variant_ids, cfg: RunConfig | None = None,
                         n_trials: int | None = None, eval_seed: int | None = None,
                         base_report: EvalReport | None = None) -> list[GeneralizationRow]:
    """Zero-shot evaluation on container variants; variant ``0`` is the base container."""
    agent = as_agent(agent)
    cfg = cfg or agent.cfg
    variant_ids = list(variant_ids)
    if not variant_ids:
        return []
    seeds = trial_seeds(cfg.eval.seed if eval_seed is None else eval_seed, n_trials or cfg.eval.trials)
    base = base_report or run_eval(agent, cfg.world, seeds=seeds, label="variant=0")
    rows = []
    for v in variant_ids:
        if v == 0:
            report = base
        else:
            report = run_eval(agent, shift_container(cfg.world, v), seeds=seeds, label=f"variant={v}")
        rows.append(GeneralizationRow(v, report, report.mean - base.mean))
    return rows


@dataclass
class MIReport:
    method: str
    k: int
    d_reduce: int
    n_samples: int
    mi: float
    valid: bool = True
    error: str = ""


def collect_latents(agent, world_cfg: WorldConfig, seeds) -> tuple[np.ndarray, np.ndarray]:
    """One fused latent per decision step, each paired with its episode's outcome."""
    agent = as_agent(agent)
    zs, ys = [], []
    for seed in seeds:
        result = rollout(agent, make_world(world_cfg, seed), seed=seed)
        ep = result.episode
        y = poured_amount(ep) if ep.task_id == "pour" else latch_score(ep)
        zs.extend(result.latents)
        ys.extend([y] * len(result.latents))
    return np.asarray(zs), np.asarray(ys)


def mi_suite(agents: dict, cfg: RunConfig, n_rollouts: int | None = None,
             eval_seed: int | None = None) -> list[MIReport]:
    k, d = cfg.mi.k, cfg.mi.d_reduce
    seeds = trial_seeds(cfg.eval.seed if eval_seed is None else eval_seed,
                        n_rollouts or cfg.mi.n_rollouts)
    rows = []
    for name, agent in agents.items():
        z, y = collect_latents(agent, cfg.world, seeds)
        try:
            rows.append(MIReport(name, k, d, len(y), estimate_mi(z, y, k, d)))
        except (DegenerateSamples, ValueError) as exc:
            rows.append(MIReport(name, k, d, len(y), float("nan"), False, str(exc)))
    return rows


# --------------------------------------------------------------------------
# output


def write_eval_tsv(path, reports: list[EvalReport]) -> None:
    lines = ["method\tlabel\ttask\tn_trials\tmean\tstd\tvalues\tconfig_hash"]
    for r in reports:
        vals = ",".join(f"{v:.6g}" for v in r.values)
        lines.append(f"{r.method}\t{r.label}\t{r.task}\t{r.n_trials}\t{r.mean:.6f}\t{r.std:.6f}\t"
                     f"{vals}\t{r.config_hash}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_eval_tsv(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def write_mi_tsv(path, rows: list[MIReport]) -> None:
    lines = ["method\tk\td_reduce\tn_samples\tmi_nats\tvalid\terror"]
    for r in rows:
        lines.append(f"{r.method}\t{r.k}\t{r.d_reduce}\t{r.n_samples}\t{r.mi:.6f}\t{int(r.valid)}\t{r.error}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
