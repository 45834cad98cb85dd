"""Receding-horizon execution of action chunks in a simulated world."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .diffusion import NoiseSchedule, sample_actions
from .pipeline import (denormalize_actions, log_mel, process_cloud, stack_indices,
                       step_end_frame, window_audio)
from .seeding import derive_seed
from .training import PolicyCheckpoint, read_policy_checkpoint
from .world import Episode, latch_step, pour_step, run_episode, scripted_expert

EXEC_SLICES = ("first", "last")


class FrameProcessor:
    """Turns the raw (audio block, cloud, proprio) history into model-ready frames.

    Frames are computed once per step and cached, so each call only
    processes the newest observation.
    """

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.frames: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    def audio_window(self, blocks: list[np.ndarray], t: int) -> np.ndarray:
        p = self.cfg.pipeline
        block = blocks[0].shape[0]
        end = step_end_frame(t, block, p.n_fft, p.hop)
        if end < 0:
            return np.full((p.window, p.n_mels), np.log(p.log_floor))
        first = max(0, end - p.window + 1)
        flat = np.concatenate(blocks[:t + 1])[first * p.hop:end * p.hop + p.n_fft]
        spec = log_mel(flat, self.cfg.world.sample_rate, p.n_fft, p.hop, p.n_mels, p.f_lo, p.f_hi,
                       p.log_floor)
        return window_audio(spec, end - first, p.window, p.log_floor)

    def update(self, history: list) -> None:
        blocks = [h[0] for h in history]
        while len(self.frames) < len(history):
            t = len(self.frames)
            _, cloud, proprio = history[t]
            self.frames.append((self.audio_window(blocks, t), process_cloud(cloud, self.cfg.pipeline),
                                np.asarray(proprio, dtype=np.float64)))

    def stacked(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = stack_indices(t, self.cfg.pipeline.n_obs)
        return tuple(np.stack([self.frames[i][j] for i in idx]) for j in range(3))


class PolicyAgent:
    """Samples action chunks from a trained diffusion policy."""

    def __init__(self, checkpoint: PolicyCheckpoint, n_steps: int | None = None):
        self.ckpt = checkpoint
        self.cfg = checkpoint.config
        self.schedule = NoiseSchedule.from_config(self.cfg)
        self.n_steps = n_steps or self.cfg.model.K_infer
        self.task = checkpoint.task
        self.processor: FrameProcessor | None = None

    @property
    def name(self) -> str:
        return self.ckpt.mode

    def reset(self) -> None:
        self.processor = FrameProcessor(self.cfg)

    def encode(self, history: list, t: int) -> torch.Tensor:
        if self.processor is None:
            self.reset()
        self.processor.update(history[:t + 1])
        audio, points, proprio = self.processor.stacked(t)
        s = self.ckpt.stats
        audio = torch.from_numpy(((audio - s.audio_mean) / s.audio_std).astype(np.float32))
        points = torch.from_numpy(points.astype(np.float32))
        proprio = torch.from_numpy(((proprio - s.proprio_mean) / s.proprio_std).astype(np.float32))
        with torch.no_grad():
            return self.ckpt.policy.encode(audio[None], points[None], proprio[None])

    def plan(self, world, t: int, history: list, seed: int) -> tuple[np.ndarray, np.ndarray]:
        z = self.encode(history, t)
        gen = torch.Generator().manual_seed(derive_seed(seed, "eval.sample", t))
        chunk = sample_actions(self.ckpt.policy, z, self.schedule, gen, self.n_steps,
                               self.cfg.model.clip_sample)
        return denormalize_actions(chunk[0].numpy(), self.ckpt.stats), z[0].numpy().astype(np.float64)


class ExpertAgent:
    """Scripted expert rolled forward on a noise-free copy of the state to form chunks."""

    name = "expert"

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.task = cfg.world.task

    def reset(self) -> None:
        pass

    def plan(self, world, t: int, history: list, seed: int) -> tuple[np.ndarray, None]:
        state = copy.deepcopy(world.state)
        step = pour_step if self.task == "pour" else latch_step
        chunk = []
        for _ in range(self.cfg.model.horizon):
            action = scripted_expert(state, world.cfg)
            chunk.append(action)
            state = step(state, action, world.cfg)[0]
        return np.asarray(chunk), None


@dataclass
class Rollout:
    episode: Episode
    decision_steps: list[int] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)


def as_agent(agent_or_checkpoint, cfg: RunConfig | None = None):
    if isinstance(agent_or_checkpoint, (PolicyAgent, ExpertAgent)):
        return agent_or_checkpoint
    if isinstance(agent_or_checkpoint, PolicyCheckpoint):
        return PolicyAgent(agent_or_checkpoint)
    return PolicyAgent(read_policy_checkpoint(agent_or_checkpoint))


def rollout(agent, world, n_a: int | None = None, max_steps: int | None = None, seed: int = 0,
            exec_slice: str | None = None) -> Rollout:
    """Run ``agent`` in ``world``, replanning whenever the executed slice is used up.

    Each plan yields an ``H+1`` chunk of which ``n_a`` actions are executed:
    the first ``n_a`` by default, or the last ``n_a`` with ``exec_slice="last"``.
    """
    agent = as_agent(agent)
    cfg = getattr(agent, "cfg", None)
    horizon = cfg.model.horizon
    n_a = cfg.model.N_a if n_a is None else int(n_a)
    exec_slice = cfg.model.exec_slice if exec_slice is None else exec_slice
    if exec_slice not in EXEC_SLICES:
        raise ValueError(f"exec_slice must be one of {EXEC_SLICES}, got {exec_slice!r}")
    if not 1 <= n_a <= horizon:
        raise ValueError(f"N_a={n_a} must lie in [1, {horizon}]")
    if agent.task != world.task_id:
        raise ValueError(f"agent is for task {agent.task!r} but the world is {world.task_id!r}")
    torch.set_num_threads(1)
    agent.reset()
    result = Rollout(episode=None)
    queue: list[np.ndarray] = []

    def act(w, t, history):
        if not queue:
            chunk, z = agent.plan(w, t, history, seed)
            queue.extend(chunk[:n_a] if exec_slice == "first" else chunk[-n_a:])
            result.decision_steps.append(t)
            if z is not None:
                result.latents.append(z)
        return queue.pop(0)

    result.episode = run_episode(world, act, max_steps)
    return result
