"""Hierarchical audio/vision/proprio fusion plus the flat and transformer baselines.

Token tensors are ``B x N_o x D``. Every fusion mode returns a ``B x 3D``
latent so the policy head is shared across modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import FUSION_MODES


class Attention(nn.Module):
    """Scaled dot-product attention with learned Q/K/V/output projections."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, context: torch.Tensor | None = None,
                return_weights: bool = False):
        context = query if context is None else context
        if query.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise ValueError(f"token width must be {self.dim}")
        b, lq, _ = query.shape
        lk = context.shape[1]
        hd = self.dim // self.heads
        q = self.q(query).view(b, lq, self.heads, hd).transpose(1, 2)
        k = self.k(context).view(b, lk, self.heads, hd).transpose(1, 2)
        v = self.v(context).view(b, lk, self.heads, hd).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-1, -2) / hd ** 0.5, dim=-1)
        out = self.out((weights @ v).transpose(1, 2).reshape(b, lq, self.dim))
        return (out, weights) if return_weights else out


class CrossAttendBlock(nn.Module):
    """``LayerNorm(CrossAttn(Q, KV) + Q)``."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, query, context, return_weights: bool = False):
        attended, weights = self.attn(query, context, return_weights=True)
        out = self.norm(attended + query)
        return (out, weights) if return_weights else out


def mlp(dim_in: int, dim_hidden: int, dim_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim_in, dim_hidden), nn.ReLU(), nn.Linear(dim_hidden, dim_out))


class AudioGate(nn.Module):
    """Audio-driven multiplicative gate ``2 * sigmoid(MLP(x_a))``, equal to 1 at zero logits."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = mlp(dim, dim, dim)

    def forward(self, x_a):
        return 2.0 * torch.sigmoid(self.net(x_a))


@dataclass
class BBFMIntermediate:
    h_p: torch.Tensor
    h_s: torch.Tensor
    h_s_hat: torch.Tensor
    gamma: torch.Tensor
    beta: torch.Tensor


class BBFM(nn.Module):
    """Binary-branched fusion: audio gates both branches, vision FiLMs proprio."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.dim = dim
        self.points_attn = Attention(dim, heads)
        self.proprio_attn = Attention(dim, heads)
        self.a2p = AudioGate(dim)
        self.a2s = AudioGate(dim)
        self.p2s = mlp(dim, dim, 2 * dim)
        nn.init.zeros_(self.p2s[-1].weight)
        nn.init.zeros_(self.p2s[-1].bias)

    def forward(self, x_a, x_p, x_s) -> BBFMIntermediate:
        if not (x_a.shape == x_p.shape == x_s.shape):
            raise ValueError(f"token shapes differ: {x_a.shape}, {x_p.shape}, {x_s.shape}")
        h_p = self.points_attn(x_p) * self.a2p(x_a)
        h_s = self.proprio_attn(x_s) * self.a2s(x_a)
        gamma, beta = self.p2s(h_p).split(self.dim, dim=-1)
        return BBFMIntermediate(h_p=h_p, h_s=h_s, h_s_hat=(1.0 + gamma) * h_s + beta,
                                gamma=gamma, beta=beta)


class IMM(nn.Module):
    """Three cross-attention streams, each modality querying the other two.

    Output order is ``[A<-PS | P<-AS | S<-AP]``, mean-pooled over query tokens
    and passed through an identity-initialised linear map.
    """

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.audio_query = CrossAttendBlock(dim, heads)
        self.points_query = CrossAttendBlock(dim, heads)
        self.proprio_query = CrossAttendBlock(dim, heads)
        self.project = nn.Linear(3 * dim, 3 * dim)
        with torch.no_grad():
            self.project.weight.copy_(torch.eye(3 * dim))
            self.project.bias.zero_()

    def streams(self, x_a, h_p, h_s):
        if not (x_a.shape == h_p.shape == h_s.shape):
            raise ValueError(f"token shapes differ: {x_a.shape}, {h_p.shape}, {h_s.shape}")
        a = self.audio_query(x_a, torch.cat([h_p, h_s], dim=1))
        p = self.points_query(h_p, torch.cat([x_a, h_s], dim=1))
        s = self.proprio_query(h_s, torch.cat([x_a, h_p], dim=1))
        return a, p, s

    def forward(self, x_a, h_p, h_s):
        a, p, s = self.streams(x_a, h_p, h_s)
        return self.project(torch.cat([a.mean(1), p.mean(1), s.mean(1)], dim=-1))


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int = 1, ff_mult: int = 2):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = mlp(dim, ff_mult * dim, dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff(x))


class Fusion(nn.Module):
    """Fusion stack for one mode; ``forward(x_a, x_p, x_s)`` gives ``B x 3D``."""

    def __init__(self, dim: int, mode: str = "hierarchical", heads: int = 1,
                 transformer_layers: int = 2):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        self.mode, self.dim = mode, dim
        if mode in ("hierarchical", "bbfm_only"):
            self.bbfm = BBFM(dim, heads)
        if mode in ("hierarchical", "imm_only"):
            self.imm = IMM(dim, heads)
        if mode == "bbfm_only":
            self.project = nn.Linear(2 * dim, 3 * dim)
        elif mode == "concat_ps":
            self.project = nn.Linear(2 * dim, 3 * dim)
        elif mode == "concat_aps":
            self.project = nn.Linear(3 * dim, 3 * dim)
        elif mode == "transformer_maniwav":
            self.modality_embed = nn.Parameter(torch.zeros(2, dim))
            nn.init.normal_(self.modality_embed, std=0.02)
            self.layers = nn.ModuleList([TransformerLayer(dim, heads) for _ in range(transformer_layers)])
            self.head = mlp(2 * dim, 3 * dim, 3 * dim)

    @property
    def uses_audio(self) -> bool:
        return self.mode != "concat_ps"

    def forward(self, x_a, x_p, x_s):
        mode = self.mode
        if mode == "hierarchical":
            inter = self.bbfm(x_a, x_p, x_s)
            return self.imm(x_a, inter.h_p, inter.h_s_hat)
        if mode == "bbfm_only":
            inter = self.bbfm(x_a, x_p, x_s)
            return self.project(torch.cat([inter.h_p.mean(1), inter.h_s_hat.mean(1)], dim=-1))
        if mode == "imm_only":
            return self.imm(x_a, x_p, x_s)
        if mode == "concat_ps":
            return self.project(torch.cat([x_p.mean(1), x_s.mean(1)], dim=-1))
        if mode == "concat_aps":
            return self.project(torch.cat([x_a.mean(1), x_p.mean(1), x_s.mean(1)], dim=-1))
        tokens = torch.cat([x_a + self.modality_embed[0], x_p + self.modality_embed[1]], dim=1)
        for layer in self.layers:
            tokens = layer(tokens)
        return self.head(torch.cat([tokens.mean(1), x_s.mean(1)], dim=-1))


class FusedEncoder(nn.Module):
    """Encoders followed by a fusion stack: raw observation to ``z``."""

    def __init__(self, encoders: nn.Module, fusion: Fusion):
        super().__init__()
        self.encoders = encoders
        self.fusion = fusion

    def tokens(self, audio, points, proprio):
        x_p = self.encoders.points(points)
        x_s = self.encoders.proprio(proprio)
        if self.fusion.uses_audio:
            x_a = self.encoders.audio(audio)
        else:
            x_a = torch.zeros_like(x_p)
        return x_a, x_p, x_s

    def forward(self, audio, points, proprio):
        return self.fusion(*self.tokens(audio, points, proprio))

