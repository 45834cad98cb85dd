"""Conditional DDPM over action chunks.

The denoiser predicts either the injected noise (``epsilon``) or the clean
chunk (``sample``). Sampling runs a strided reverse chain over
``K_infer`` of the ``K`` training noise levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .encoders import Encoders
from .fusion import Fusion, FusedEncoder


@dataclass
class NoiseSchedule:
    betas: torch.Tensor

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64)
        if betas.ndim != 1 or betas.numel() < 1:
            raise ValueError("betas must be a non-empty vector")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    @property
    def K(self) -> int:
        return int(self.betas.numel())

    @classmethod
    def squared_cosine(cls, K: int, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        def f(t):
            return math.cos((t / K + s) / (1 + s) * math.pi / 2) ** 2

        betas = [min(1.0 - f(i + 1) / f(i), max_beta) for i in range(K)]
        return cls(torch.tensor(betas, dtype=torch.float64))

    @classmethod
    def linear(cls, K: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(torch.linspace(beta_start, beta_end, K, dtype=torch.float64))

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "NoiseSchedule":
        if cfg.model.beta_schedule == "linear":
            return cls.linear(cfg.model.K)
        return cls.squared_cosine(cfg.model.K)

    def inference_steps(self, n: int) -> list[int]:
        """Descending noise levels visited by a strided reverse chain, ending at 0."""
        n = max(1, min(n, self.K))
        steps = np.unique(np.round(np.linspace(0, self.K - 1, n)).astype(int))[::-1]
        return [int(s) for s in steps]


def _broadcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(a0: torch.Tensor, k, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_k) * a0 + sqrt(1 - abar_k) * noise`` (``k`` scalar or per-batch)."""
    k = torch.as_tensor(k, dtype=torch.long)
    if bool(((k < 0) | (k >= schedule.K)).any()):
        raise ValueError(f"noise level out of range [0, {schedule.K})")
    abar = schedule.alpha_bars[k]
    if abar.ndim == 0:
        abar = abar.expand(a0.shape[0]) if a0.ndim > 1 else abar.reshape(1)
    abar = _broadcast(abar, a0) if a0.ndim > 1 else abar.to(a0.dtype)
    return abar.sqrt() * a0 + (1.0 - abar).sqrt() * noise


def posterior_mean(a_k: torch.Tensor, a0: torch.Tensor, k: int, prev: int,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Mean of ``q(a_prev | a_k, a0)`` for a (possibly strided) step ``k -> prev``."""
    abar_t = schedule.alpha_bars[k]
    abar_prev = schedule.alpha_bars[prev] if prev >= 0 else torch.tensor(1.0, dtype=torch.float64)
    beta_t = 1.0 - abar_t / abar_prev
    c0 = abar_prev.sqrt() * beta_t / (1.0 - abar_t)
    ct = (1.0 - beta_t).sqrt() * (1.0 - abar_prev) / (1.0 - abar_t)
    return c0.to(a0.dtype) * a0 + ct.to(a_k.dtype) * a_k


def posterior_variance(k: int, prev: int, schedule: NoiseSchedule) -> float:
    abar_t = schedule.alpha_bars[k]
    abar_prev = schedule.alpha_bars[prev] if prev >= 0 else torch.tensor(1.0, dtype=torch.float64)
    beta_t = 1.0 - abar_t / abar_prev
    return float((1.0 - abar_prev) / (1.0 - abar_t) * beta_t)


def sinusoidal_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = k.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResidualFiLMBlock(nn.Module):
    def __init__(self, hidden: int, cond_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(hidden, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.film = nn.Linear(cond_dim, 2 * hidden)
        self.fc2 = nn.Linear(hidden, hidden)

    def forward(self, h, cond):
        scale, shift = self.film(F.mish(cond)).chunk(2, dim=-1)
        y = self.norm(self.fc1(h)) * (1.0 + scale) + shift
        return h + self.fc2(F.mish(y))


class Denoiser(nn.Module):
    """Residual MLP over ``[flatten(a_k) | embed(k) | z]`` with FiLM conditioning."""

    def __init__(self, action_dim: int, horizon: int, cond_dim: int, hidden: int = 256,
                 blocks: int = 3, time_embed: int = 64):
        super().__init__()
        self.action_dim, self.horizon, self.cond_dim = action_dim, horizon, cond_dim
        self.time_embed = time_embed
        self.time_mlp = nn.Sequential(nn.Linear(time_embed, 2 * time_embed), nn.Mish(),
                                      nn.Linear(2 * time_embed, time_embed))
        flat = action_dim * horizon
        cond = time_embed + cond_dim
        self.inp = nn.Linear(flat + cond, hidden)
        self.blocks = nn.ModuleList([ResidualFiLMBlock(hidden, cond) for _ in range(blocks)])
        self.out = nn.Linear(hidden, flat)

    def forward(self, a_k: torch.Tensor, k, z: torch.Tensor) -> torch.Tensor:
        b = a_k.shape[0]
        if a_k.shape[1:] != (self.horizon, self.action_dim) or z.shape != (b, self.cond_dim):
            raise ValueError(f"bad shapes a_k={tuple(a_k.shape)} z={tuple(z.shape)}")
        k = torch.as_tensor(k, dtype=torch.long).reshape(-1)
        if k.numel() == 1:
            k = k.expand(b)
        temb = self.time_mlp(sinusoidal_embedding(k, self.time_embed).to(a_k.dtype))
        cond = torch.cat([temb, z], dim=-1)
        h = self.inp(torch.cat([a_k.reshape(b, -1), cond], dim=-1))
        for block in self.blocks:
            h = block(h, cond)
        return self.out(F.mish(h)).reshape(a_k.shape)


class DiffusionPolicy(nn.Module):
    """Encoders, fusion and denoiser trained end to end."""

    def __init__(self, cfg: RunConfig, proprio_dim: int, action_dim: int, mode: str | None = None):
        super().__init__()
        m, p = cfg.model, cfg.pipeline
        self.mode = mode or m.fusion
        self.prediction = m.prediction
        encoders = Encoders(p.n_mels, p.window, proprio_dim, m.D, m.audio_channels,
                            tuple(m.point_widths), m.proprio_hidden)
        self.observer = FusedEncoder(encoders, Fusion(m.D, self.mode, m.heads, m.transformer_layers))
        self.denoiser = Denoiser(action_dim, m.horizon, 3 * m.D, m.denoiser_hidden,
                                 m.denoiser_blocks, m.time_embed)

    @property
    def encoders(self) -> Encoders:
        return self.observer.encoders

    @property
    def fusion(self) -> Fusion:
        return self.observer.fusion

    def encode(self, audio, points, proprio) -> torch.Tensor:
        return self.observer(audio, points, proprio)

    def parameter_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        groups = {
            "audio_encoder": list(self.encoders.audio.parameters()),
            "point_encoder": list(self.encoders.points.parameters()),
            "proprio_encoder": list(self.encoders.proprio.parameters()),
            "denoiser": list(self.denoiser.parameters()),
        }
        for name, child in self.fusion.named_children():
            groups[f"fusion.{name}"] = list(child.parameters())
        own = [p for n, p in self.fusion.named_parameters(recurse=False)]
        if own:
            groups["fusion.embed"] = own
        return groups


def bc_loss(policy: DiffusionPolicy, batch: dict[str, torch.Tensor], schedule: NoiseSchedule,
            generator: torch.Generator | None = None, return_parts: bool = False):
    """Behaviour-cloning diffusion loss on a batch of (observation, expert chunk) pairs."""
    actions = batch["actions"]
    b = actions.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    z = policy.encode(batch["audio"], batch["points"], batch["proprio"])
    k = torch.randint(0, schedule.K, (b,), generator=generator)
    noise = torch.randn(actions.shape, generator=generator, dtype=actions.dtype)
    noisy = forward_diffuse(actions, k, noise, schedule)
    pred = policy.denoiser(noisy, k, z)
    target = noise if policy.prediction == "epsilon" else actions
    loss = F.mse_loss(pred, target)
    if return_parts:
        return loss, {"k": k, "noise": noise, "noisy": noisy, "pred": pred, "z": z}
    return loss


def predict_clean(pred: torch.Tensor, a_k: torch.Tensor, k: int, schedule: NoiseSchedule,
                  prediction: str) -> torch.Tensor:
    if prediction == "sample":
        return pred
    abar = schedule.alpha_bars[k].to(a_k.dtype)
    return (a_k - (1.0 - abar).sqrt() * pred) / abar.sqrt()


def reverse_step(a_k: torch.Tensor, pred: torch.Tensor, k: int, prev: int, schedule: NoiseSchedule,
                 prediction: str = "epsilon", clip: bool = False,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """One ancestral step ``k -> prev``; ``noise=None`` returns the mean."""
    a0 = predict_clean(pred, a_k, k, schedule, prediction)
    if clip:
        a0 = a0.clamp(-1.0, 1.0)
    mean = posterior_mean(a_k, a0, k, prev, schedule)
    if noise is None or prev < 0:
        return mean
    return mean + math.sqrt(max(posterior_variance(k, prev, schedule), 1e-20)) * noise


@torch.no_grad()
def sample_actions(policy: DiffusionPolicy, z: torch.Tensor, schedule: NoiseSchedule,
                   generator: torch.Generator | None = None, n_steps: int | None = None,
                   clip: bool = True) -> torch.Tensor:
    """Draw normalised action chunks ``B x (H+1) x D_a`` conditioned on ``z``."""
    den = policy.denoiser
    shape = (z.shape[0], den.horizon, den.action_dim)
    a = torch.randn(shape, generator=generator, dtype=z.dtype)
    steps = schedule.inference_steps(n_steps or schedule.K)
    for i, k in enumerate(steps):
        prev = steps[i + 1] if i + 1 < len(steps) else -1
        pred = den(a, torch.full((shape[0],), k, dtype=torch.long), z)
        noise = torch.randn(shape, generator=generator, dtype=z.dtype) if prev >= 0 else None
        a = reverse_step(a, pred, k, prev, schedule, policy.prediction, clip, noise)
    return a
