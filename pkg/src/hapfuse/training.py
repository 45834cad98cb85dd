"""Behaviour-cloning training, audio/proprio pretraining and policy checkpoints.

Every optimisation step draws its minibatch and diffusion noise from streams
seeded by ``(seed, step)``, so a run resumed from a checkpoint replays the
uninterrupted run exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, parse_config
from .diffusion import DiffusionPolicy, NoiseSchedule, bc_loss
from .encoders import AudioProprioAutoencoder
from .parallel import parallel_map
from .pipeline import NormStats, audio_windows, fit_norm_stats, process_cloud, stack_indices
from .seeding import derive_seed, generator
from .storage import load_checkpoint, read_manifest, load_dataset, save_checkpoint
from .world import Episode

METRICS_FILE = "metrics.tsv"
FINAL_CHECKPOINT = "policy.ckpt"


class DatasetMismatch(ValueError):
    """The dataset does not fit the configuration (task or dimensions differ)."""


# --------------------------------------------------------------------------
# features


def episode_features(episode: Episode, cfg: RunConfig) -> tuple[np.ndarray, ...]:
    """Per-step (audio window, sampled cloud, proprio, action) arrays for one episode."""
    p = cfg.pipeline
    audio = audio_windows(episode.waveform, cfg.world.sample_rate, p).astype(np.float32)
    points = np.stack([process_cloud(c, p) for c in episode.pointclouds]).astype(np.float32)
    return audio, points, episode.proprio.astype(np.float32), episode.actions.astype(np.float32)


def _features_job(args):
    episode, cfg = args
    return episode_features(episode, cfg)


@dataclass
class FeatureSet:
    """Concatenated per-step features of a dataset plus episode boundaries."""

    task: str
    audio: np.ndarray
    points: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    lengths: np.ndarray
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)

    def __len__(self) -> int:
        return int(self.lengths.sum())

    def subset(self, episodes: list[int]) -> "FeatureSet":
        rows = np.concatenate([np.arange(self.starts[e], self.starts[e] + self.lengths[e])
                               for e in episodes])
        return FeatureSet(self.task, self.audio[rows], self.points[rows], self.proprio[rows],
                          self.actions[rows], self.lengths[list(episodes)])

    def sample_indices(self, n_obs: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices of the stacked observation and of the target chunk for every sample.

        Observations repeat the first frame before the episode start; chunks
        repeat the last action past the episode end.
        """
        obs, act = [], []
        for start, length in zip(self.starts, self.lengths):
            for t in range(length):
                obs.append(start + stack_indices(t, n_obs))
                act.append(start + np.minimum(t + np.arange(horizon), length - 1))
        return np.asarray(obs, dtype=np.int64), np.asarray(act, dtype=np.int64)


def build_features(episodes: list[Episode], cfg: RunConfig) -> FeatureSet:
    if not episodes:
        raise ValueError("no episodes")
    tasks = {e.task_id for e in episodes}
    if tasks != {cfg.world.task}:
        raise DatasetMismatch(f"dataset task {sorted(tasks)} does not match config task "
                              f"{cfg.world.task!r}")
    for e in episodes:
        if e.actions.shape[1] != cfg.world.action_dim or e.proprio.shape[1] != cfg.world.proprio_dim:
            raise DatasetMismatch(
                f"episode dimensions (actions {e.actions.shape[1]}, proprio {e.proprio.shape[1]}) "
                f"differ from config (actions {cfg.world.action_dim}, proprio {cfg.world.proprio_dim})")
    parts = parallel_map(_features_job, [(e, cfg) for e in episodes])
    return FeatureSet(cfg.world.task, *(np.concatenate([p[i] for p in parts]) for i in range(4)),
                      lengths=[len(e) for e in episodes])


def load_features(dataset_dir, cfg: RunConfig) -> FeatureSet:
    manifest = read_manifest(dataset_dir)
    if manifest["task"] != cfg.world.task:
        raise DatasetMismatch(f"dataset task {manifest['task']!r} does not match config task "
                              f"{cfg.world.task!r}")
    return build_features(load_dataset(dataset_dir), cfg)


def fit_stats(features: FeatureSet) -> NormStats:
    """Normalisation statistics, rounded to float32 so checkpoints reproduce them exactly."""
    stats = fit_norm_stats(features.proprio, features.actions, features.audio)
    rounded = {}
    for key, value in stats.to_arrays().items():
        r = value.astype(np.float32)
        if key.endswith("_std"):
            # keep the floor after rounding down to float32
            r = np.where(r < value, np.nextafter(r, np.float32(np.inf)), r)
        rounded[key] = r
    return NormStats.from_arrays(rounded)


class TrainingTensors:
    """Normalised feature tensors and sample index tables ready for batching."""

    def __init__(self, features: FeatureSet, stats: NormStats, cfg: RunConfig):
        self.audio = torch.from_numpy(
            ((features.audio - stats.audio_mean) / stats.audio_std).astype(np.float32))
        self.points = torch.from_numpy(features.points)
        self.proprio = torch.from_numpy(
            ((features.proprio - stats.proprio_mean) / stats.proprio_std).astype(np.float32))
        self.actions = torch.from_numpy(
            ((features.actions - stats.action_center) / stats.action_scale).astype(np.float32))
        obs, act = features.sample_indices(cfg.pipeline.n_obs, cfg.model.horizon)
        self.obs_index = torch.from_numpy(obs)
        self.act_index = torch.from_numpy(act)

    def __len__(self) -> int:
        return int(self.obs_index.shape[0])

    def batch(self, rows: np.ndarray) -> dict[str, torch.Tensor]:
        rows = torch.as_tensor(rows, dtype=torch.long)
        obs = self.obs_index[rows]
        return {"audio": self.audio[obs], "points": self.points[obs],
                "proprio": self.proprio[obs], "actions": self.actions[self.act_index[rows]]}


# --------------------------------------------------------------------------
# schedule and checkpoints


def learning_rate(step: int, cfg: RunConfig) -> float:
    """Linear warmup to ``lr`` followed by cosine decay to ``min_lr``."""
    t = cfg.train
    if t.warmup > 0 and step < t.warmup:
        return t.lr * (step + 1) / t.warmup
    span = max(1, t.steps - t.warmup)
    progress = min(1.0, (step - t.warmup) / span)
    return t.min_lr + 0.5 * (t.lr - t.min_lr) * (1.0 + math.cos(math.pi * progress))


def _state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {k[len(prefix):]: torch.from_numpy(np.array(v, dtype=np.float32))
             for k, v in arrays.items() if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise ValueError(f"checkpoint lacks weights: {sorted(missing)[:3]}")
    module.load_state_dict(state)


def _optimizer_arrays(optimizer: torch.optim.Optimizer, params: list) -> dict[str, np.ndarray]:
    out = {}
    for i, p in enumerate(params):
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"optim.{i}.step"] = np.atleast_1d(np.float32(float(state["step"])))
        out[f"optim.{i}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
        out[f"optim.{i}.exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(np.float32)
    return out


def _restore_optimizer(optimizer: torch.optim.Optimizer, params: list,
                       arrays: dict[str, np.ndarray]) -> None:
    for i, p in enumerate(params):
        if f"optim.{i}.step" not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(arrays[f"optim.{i}.step"][0])),
            "exp_avg": torch.from_numpy(np.array(arrays[f"optim.{i}.exp_avg"])).reshape(p.shape),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"optim.{i}.exp_avg_sq"])).reshape(p.shape),
        }


@dataclass
class PolicyCheckpoint:
    config: RunConfig
    mode: str
    step: int
    policy: DiffusionPolicy
    stats: NormStats
    meta: dict
    optimizer_arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.meta["task"]


def build_policy(cfg: RunConfig, mode: str | None = None) -> DiffusionPolicy:
    return DiffusionPolicy(cfg, cfg.world.proprio_dim, cfg.world.action_dim, mode)


def write_policy_checkpoint(path, cfg: RunConfig, policy: DiffusionPolicy, stats: NormStats,
                            step: int, extra_meta: dict | None = None,
                            optimizer_arrays: dict[str, np.ndarray] | None = None) -> Path:
    meta = {"task": cfg.world.task, "mode": policy.mode, "step": int(step),
            "proprio_dim": cfg.world.proprio_dim, "action_dim": cfg.world.action_dim,
            "version": __version__}
    meta.update(extra_meta or {})
    arrays = _state_arrays(policy, "model.")
    arrays.update({k: v.astype(np.float32) for k, v in stats.to_arrays().items()})
    arrays.update(optimizer_arrays or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, cfg.to_text(), meta, arrays)
    return path


def read_policy_checkpoint(path) -> PolicyCheckpoint:
    text, meta, arrays = load_checkpoint(path)
    cfg = parse_config(text)
    policy = build_policy(cfg, meta["mode"])
    _load_state(policy, arrays, "model.")
    policy.eval()
    optim = {k: v for k, v in arrays.items() if k.startswith("optim.")}
    return PolicyCheckpoint(cfg, meta["mode"], int(meta["step"]), policy,
                            NormStats.from_arrays(arrays), meta, optim)


# --------------------------------------------------------------------------
# pretraining


def pretrain_audio_proprio(features: FeatureSet, cfg: RunConfig, seed: int,
                           stats: NormStats | None = None, policy: DiffusionPolicy | None = None,
                           steps: int | None = None) -> tuple[DiffusionPolicy, list[float]]:
    """Fit the audio and proprio encoders by joint reconstruction through a shared bottleneck."""
    torch.set_num_threads(1)
    if len(features) == 0:
        raise ValueError("empty dataset")
    stats = stats or fit_stats(features)
    policy = policy or _init_policy(cfg, seed, None)
    tensors = TrainingTensors(features, stats, cfg)
    ae = AudioProprioAutoencoder(policy.encoders.audio, policy.encoders.proprio, cfg.model.D)
    torch.manual_seed(derive_seed(seed, "pretrain.init"))
    for module in (ae.bottleneck, ae.audio_decoder, ae.proprio_decoder):
        for layer in module:
            if isinstance(layer, torch.nn.Linear):
                layer.reset_parameters()
    optimizer = torch.optim.AdamW(ae.parameters(), lr=cfg.train.lr,
                                  weight_decay=cfg.train.weight_decay)
    losses = []
    n_rows = tensors.audio.shape[0]
    for step in range(cfg.train.pretrain_steps if steps is None else steps):
        rows = torch.as_tensor(generator(seed, "pretrain.batch", step)
                               .integers(0, n_rows, size=cfg.train.batch))
        loss = ae.loss(tensors.audio[rows], tensors.proprio[rows], cfg.train.lambda_p)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return policy, losses


# --------------------------------------------------------------------------
# behaviour cloning


@dataclass
class TrainResult:
    policy: DiffusionPolicy
    stats: NormStats
    checkpoint: Path | None
    steps: list[int]
    losses: list[float]


def _init_policy(cfg: RunConfig, seed: int, mode: str | None) -> DiffusionPolicy:
    torch.manual_seed(derive_seed(seed, "train.init"))
    return build_policy(cfg, mode)


def _read_metrics(path: Path, upto: int) -> tuple[list[int], list[float]]:
    steps, losses = [], []
    if path.exists():
        for line in path.read_text().splitlines():
            s, loss, _ = line.split("\t")
            if int(s) < upto:
                steps.append(int(s))
                losses.append(float(loss))
    return steps, losses


def train(features: FeatureSet, cfg: RunConfig, seed: int | None = None, out_dir=None,
          mode: str | None = None, resume=None, init_encoders=None,
          stop_at: int | None = None) -> TrainResult:
    """Optimise the full policy end to end on the behaviour-cloning diffusion loss.

    ``resume`` is a checkpoint path written by an earlier call with the same
    config and seed. ``stop_at`` ends the run early (the schedule still
    spans ``train.steps``), which is how interrupted runs are simulated.
    """
    torch.set_num_threads(1)
    seed = cfg.train.seed if seed is None else int(seed)
    if len(features) == 0:
        raise ValueError("empty dataset")
    if features.task != cfg.world.task:
        raise DatasetMismatch(f"features are for task {features.task!r}, config is {cfg.world.task!r}")
    if features.actions.shape[1] != cfg.world.action_dim:
        raise DatasetMismatch(f"dataset action dim {features.actions.shape[1]} != "
                              f"config action dim {cfg.world.action_dim}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    schedule = NoiseSchedule.from_config(cfg)

    start = 0
    if resume is not None:
        ckpt = read_policy_checkpoint(resume)
        if ckpt.meta["task"] != cfg.world.task:
            raise DatasetMismatch("checkpoint task differs from config")
        policy, stats, start = ckpt.policy, ckpt.stats, ckpt.step
        mode = ckpt.mode
    else:
        stats = fit_stats(features)
        policy = _init_policy(cfg, seed, mode)
        if init_encoders is not None:
            _load_state(policy.encoders.audio, init_encoders, "audio.")
            _load_state(policy.encoders.proprio, init_encoders, "proprio.")
        elif cfg.train.pretrain:
            pretrain_audio_proprio(features, cfg, seed, stats, policy)
    policy.train()
    tensors = TrainingTensors(features, stats, cfg)
    params = list(policy.parameters())
    optimizer = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    if resume is not None:
        _restore_optimizer(optimizer, params, ckpt.optimizer_arrays)

    metrics = out / METRICS_FILE if out is not None else None
    steps, losses = _read_metrics(metrics, start) if (metrics and resume is not None) else ([], [])
    if metrics is not None:
        metrics.write_text("".join(f"{s}\t{l!r}\t{learning_rate(s, cfg)!r}\n"
                                   for s, l in zip(steps, losses)))
    log = metrics.open("a") if metrics is not None else None
    end = cfg.train.steps if stop_at is None else min(stop_at, cfg.train.steps)
    meta = {"seed": seed, "train_steps": cfg.train.steps}
    checkpoint = None
    try:
        for step in range(start, end):
            lr = learning_rate(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            rows = generator(seed, "train.batch", step).integers(0, len(tensors), size=cfg.train.batch)
            noise_gen = torch.Generator().manual_seed(derive_seed(seed, "train.noise", step))
            loss = bc_loss(policy, tensors.batch(rows), schedule, noise_gen)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            steps.append(step)
            losses.append(value)
            if log is not None and step % cfg.train.log_every == 0:
                log.write(f"{step}\t{value!r}\t{lr!r}\n")
            done = step + 1
            if out is not None and cfg.train.checkpoint_every and done % cfg.train.checkpoint_every == 0:
                write_policy_checkpoint(out / f"step_{done:06d}.ckpt", cfg, policy, stats, done, meta,
                                        _optimizer_arrays(optimizer, params))
    finally:
        if log is not None:
            log.close()
    policy.eval()
    if out is not None:
        checkpoint = write_policy_checkpoint(out / FINAL_CHECKPOINT, cfg, policy, stats,
                                             max(start, end), meta, _optimizer_arrays(optimizer, params))
    return TrainResult(policy, stats, checkpoint, steps, losses)


def encoder_arrays(policy: DiffusionPolicy) -> dict[str, np.ndarray]:
    """Pretrained audio/proprio encoder weights in the layout ``train(init_encoders=...)`` reads."""
    out = _state_arrays(policy.encoders.audio, "audio.")
    out.update(_state_arrays(policy.encoders.proprio, "proprio."))
    return out


def ema(values, decay: float = 0.98) -> np.ndarray:
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else decay * acc + (1.0 - decay) * v
        out[i] = acc
    return out
