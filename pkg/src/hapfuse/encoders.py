"""Per-modality encoders and the joint audio/proprio autoencoding pretraining.

Each encoder maps one frame to a ``D``-dimensional token; stacked frames are
folded into the batch axis so a ``B x N_o x ...`` input yields ``B x N_o x D``.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _per_frame(module: nn.Module, x: torch.Tensor, frame_dims: int) -> torch.Tensor:
    lead = x.shape[:-frame_dims]
    out = module(x.reshape(-1, *x.shape[-frame_dims:]))
    return out.reshape(*lead, out.shape[-1])


class AudioEncoder(nn.Module):
    """Dual-path log-Mel encoder.

    The temporal path convolves along time with Mel bins as channels and
    mean-pools over time; the spectral path convolves along frequency with
    time frames as channels and mean-pools over frequency. The two summaries
    are concatenated and projected to ``D``.
    """

    def __init__(self, n_mels: int, window: int, dim: int, channels: int = 32):
        super().__init__()
        self.n_mels, self.window = n_mels, window
        self.time_path = nn.Sequential(
            nn.Conv1d(n_mels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=1), nn.ReLU())
        self.freq_path = nn.Sequential(
            nn.Conv1d(window, channels, 3, padding=1), nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=1), nn.ReLU())
        self.project = nn.Sequential(nn.Linear(2 * channels, dim), nn.ReLU())

    def encode_frame(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.shape[-2:] != (self.window, self.n_mels):
            raise ValueError(f"expected (..., {self.window}, {self.n_mels}) log-Mel windows, "
                             f"got {tuple(spec.shape)}")
        temporal = self.time_path(spec.transpose(1, 2)).mean(dim=2)
        spectral = self.freq_path(spec).mean(dim=2)
        return self.project(torch.cat([temporal, spectral], dim=-1))

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        return _per_frame(self.encode_frame, audio, 2)


class PointEncoder(nn.Module):
    """Shared per-point MLP with LayerNorm/ReLU, max-pooled, then projected."""

    def __init__(self, dim: int, widths: tuple[int, ...] = (64, 128, 256)):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 3
        for width in widths:
            layers += [nn.Linear(prev, width), nn.LayerNorm(width), nn.ReLU()]
            prev = width
        self.point_mlp = nn.Sequential(*layers)
        self.project = nn.Linear(prev, dim)

    def encode_frame(self, points: torch.Tensor) -> torch.Tensor:
        if points.shape[-1] != 3:
            raise ValueError(f"expected (..., N, 3) point clouds, got {tuple(points.shape)}")
        return self.project(self.point_mlp(points).max(dim=1).values)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return _per_frame(self.encode_frame, points, 2)


class ProprioEncoder(nn.Module):
    def __init__(self, in_dim: int, dim: int, hidden: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, proprio: torch.Tensor) -> torch.Tensor:
        if proprio.shape[-1] != self.in_dim:
            raise ValueError(f"expected proprio of width {self.in_dim}, got {tuple(proprio.shape)}")
        return self.fc2(F.relu(self.fc1(proprio)))


class Encoders(nn.Module):
    def __init__(self, n_mels: int, window: int, proprio_dim: int, dim: int,
                 audio_channels: int = 32, point_widths: tuple[int, ...] = (64, 128, 256),
                 proprio_hidden: int = 64):
        super().__init__()
        self.audio = AudioEncoder(n_mels, window, dim, audio_channels)
        self.points = PointEncoder(dim, point_widths)
        self.proprio = ProprioEncoder(proprio_dim, dim, proprio_hidden)

    def forward(self, audio, points, proprio):
        return self.audio(audio), self.points(points), self.proprio(proprio)


class AudioProprioAutoencoder(nn.Module):
    """Shared-latent autoencoder grounding audio features in the robot state.

    The concatenated audio and proprio embeddings pass through a bottleneck
    and are decoded back to the log-Mel window and the proprio vector. Only
    the encoders are kept after pretraining.
    """

    def __init__(self, audio: AudioEncoder, proprio: ProprioEncoder, dim: int,
                 bottleneck: int = 32, hidden: int = 128):
        super().__init__()
        self.audio, self.proprio = audio, proprio
        self.bottleneck = nn.Sequential(nn.Linear(2 * dim, bottleneck), nn.ReLU())
        self.audio_decoder = nn.Sequential(
            nn.Linear(bottleneck, hidden), nn.ReLU(),
            nn.Linear(hidden, audio.window * audio.n_mels))
        self.proprio_decoder = nn.Sequential(
            nn.Linear(bottleneck, hidden), nn.ReLU(), nn.Linear(hidden, proprio.in_dim))

    def forward(self, audio: torch.Tensor, proprio: torch.Tensor):
        latent = self.bottleneck(torch.cat([self.audio(audio), self.proprio(proprio)], dim=-1))
        recon_audio = self.audio_decoder(latent).reshape(audio.shape)
        return recon_audio, self.proprio_decoder(latent)

    def loss(self, audio: torch.Tensor, proprio: torch.Tensor, lambda_p: float = 1.0):
        recon_audio, recon_proprio = self(audio, proprio)
        audio_term = F.mse_loss(recon_audio, audio)
        if lambda_p == 0:
            return audio_term
        return audio_term + lambda_p * F.mse_loss(recon_proprio, proprio)
