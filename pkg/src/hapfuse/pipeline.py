"""Raw sensor streams to model-ready observations.

Audio becomes an HTK-scale log-Mel spectrogram windowed per control step,
point clouds are cropped and farthest-point sampled to a fixed size, and the
last ``n_obs`` frames of each modality are stacked.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig

STD_FLOOR = 1e-6


class EmptyCropWarning(UserWarning):
    """No point survived the crop; the crop-box centre was substituted."""


# --------------------------------------------------------------------------
# audio


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, f_lo: float, f_hi: float) -> np.ndarray:
    """``n_mels + 2`` band edges in Hz; filter ``j`` peaks at ``edges[j + 1]``."""
    return mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))


def mel_filterbank(sr: int, n_fft: int, n_mels: int, f_lo: float, f_hi: float) -> np.ndarray:
    """Triangular HTK filterbank, shape ``(n_mels, n_fft // 2 + 1)``, unit peak height."""
    edges = mel_band_edges(n_mels, f_lo, f_hi)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, n_fft: int, hop: int) -> int:
    return 1 + (n_samples - n_fft) // hop


def log_mel(waveform: np.ndarray, sr: int, n_fft: int, hop: int, n_mels: int,
            f_lo: float, f_hi: float, floor: float = 1e-10) -> np.ndarray:
    """Log-Mel power spectrogram, shape ``(frames, n_mels)``.

    Frames are Hann-windowed, ``frames = 1 + (len - n_fft) // hop``.
    """
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if x.size < n_fft:
        raise ValueError(f"waveform has {x.size} samples, need at least n_fft={n_fft}")
    n_frames = frame_count(x.size, n_fft, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    window = np.hanning(n_fft + 1)[:-1]
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = power @ mel_filterbank(sr, n_fft, n_mels, f_lo, f_hi).T
    return np.log(mel + floor)


def window_audio(frames: np.ndarray, t: int, T: int, floor: float = 1e-10) -> np.ndarray:
    """Last ``T`` frames ending at frame index ``t``, left-padded with silence."""
    if t < 0:
        raise ValueError("t must be >= 0")
    start = t - T + 1
    out = frames[max(0, start):t + 1]
    if start < 0:
        pad = np.full((-start, frames.shape[1]), np.log(floor), dtype=frames.dtype)
        out = np.concatenate([pad, out], axis=0)
    return out


def step_end_frame(step: int, block_size: int, n_fft: int, hop: int) -> int:
    """Index of the last spectrogram frame fully inside audio blocks ``0..step``."""
    return ((step + 1) * block_size - n_fft) // hop


def audio_windows(waveform_blocks: np.ndarray, sr: int, cfg: PipelineConfig) -> np.ndarray:
    """One ``T x M`` log-Mel window per control step of an episode."""
    blocks = np.asarray(waveform_blocks)
    n_steps, block = blocks.shape
    silence = np.full((cfg.window, cfg.n_mels), np.log(cfg.log_floor))
    flat = blocks.reshape(-1)
    if flat.size < cfg.n_fft:
        return np.repeat(silence[None], n_steps, axis=0)
    spec = log_mel(flat, sr, cfg.n_fft, cfg.hop, cfg.n_mels, cfg.f_lo, cfg.f_hi, cfg.log_floor)
    out = np.empty((n_steps, cfg.window, cfg.n_mels))
    for step in range(n_steps):
        end = step_end_frame(step, block, cfg.n_fft, cfg.hop)
        out[step] = silence if end < 0 else window_audio(spec, end, cfg.window, cfg.log_floor)
    return out


# --------------------------------------------------------------------------
# point clouds


def farthest_point_sample(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Indices of ``n`` points chosen greedily by max-min Euclidean distance."""
    points = np.asarray(points, dtype=np.float64)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def crop_and_fps(points: np.ndarray, crop_min, crop_max, n: int, seed: int = 0,
                 return_flag: bool = False):
    """Crop to the box, then farthest-point sample (or cyclically pad) to ``n`` points.

    Only xyz columns are used. If nothing survives the crop, ``n`` copies of
    the box centre are returned and an :class:`EmptyCropWarning` is issued.
    """
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    if pts.shape[0] < 1:
        raise ValueError("need at least one point")
    lo, hi = np.asarray(crop_min, dtype=np.float64), np.asarray(crop_max, dtype=np.float64)
    kept = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    if kept.shape[0] == 0:
        warnings.warn("no points inside the crop box", EmptyCropWarning, stacklevel=2)
        out = np.repeat(((lo + hi) / 2.0)[None], n, axis=0)
        return (out, True) if return_flag else out
    if kept.shape[0] <= n:
        out = kept[np.arange(n) % kept.shape[0]]
    else:
        start = int(np.random.default_rng(seed).integers(kept.shape[0]))
        out = kept[farthest_point_sample(kept, n, start)]
    return (out, False) if return_flag else out


def normalize_points(points: np.ndarray, crop_min, crop_max) -> np.ndarray:
    """Map the crop box onto ``[-1, 1]^3``."""
    lo, hi = np.asarray(crop_min), np.asarray(crop_max)
    return (points - (lo + hi) / 2.0) / ((hi - lo) / 2.0)


def process_cloud(cloud: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    sampled = crop_and_fps(cloud, cfg.crop_min, cfg.crop_max, cfg.n_points, cfg.fps_seed)
    return normalize_points(sampled, cfg.crop_min, cfg.crop_max)


# --------------------------------------------------------------------------
# frame stacking


@dataclass
class Observation:
    audio: np.ndarray  # N_o x T x M
    points: np.ndarray  # N_o x N x 3
    proprio: np.ndarray  # N_o x D_s


def stack_indices(t: int, n_obs: int) -> np.ndarray:
    """History indices for step ``t``, repeating frame 0 before the episode start."""
    return np.maximum(np.arange(t - n_obs + 1, t + 1), 0)


def stack_frames(history: list[tuple[np.ndarray, np.ndarray, np.ndarray]], n_obs: int) -> Observation:
    """Stack the last ``n_obs`` (audio, points, proprio) frames, oldest first."""
    if not history:
        raise ValueError("history is empty")
    idx = stack_indices(len(history) - 1, n_obs)
    return Observation(audio=np.stack([history[i][0] for i in idx]),
                       points=np.stack([history[i][1] for i in idx]),
                       proprio=np.stack([history[i][2] for i in idx]))


def unstack_frames(obs: Observation) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    return [(obs.audio[i], obs.points[i], obs.proprio[i]) for i in range(obs.audio.shape[0])]


# --------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    proprio_mean: np.ndarray
    proprio_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray
    audio_mean: float
    audio_std: float

    def to_arrays(self, prefix: str = "norm.") -> dict[str, np.ndarray]:
        return {prefix + k: np.atleast_1d(np.asarray(v, dtype=np.float64))
                for k, v in self.__dict__.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "norm.") -> "NormStats":
        vals = {k[len(prefix):]: np.asarray(v, dtype=np.float64)
                for k, v in arrays.items() if k.startswith(prefix)}
        vals["audio_mean"] = float(vals["audio_mean"][0])
        vals["audio_std"] = float(vals["audio_std"][0])
        return cls(**vals)

    # actions live in [-1, 1] via dataset min/max
    @property
    def action_center(self) -> np.ndarray:
        return (self.action_max + self.action_min) / 2.0

    @property
    def action_scale(self) -> np.ndarray:
        return np.maximum((self.action_max - self.action_min) / 2.0, STD_FLOOR)


def zscore_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot fit statistics on an empty dataset")
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def apply_norm(x, mean, std):
    return (np.asarray(x, dtype=np.float64) - mean) / std


def invert_norm(x, mean, std):
    return np.asarray(x, dtype=np.float64) * std + mean


def fit_norm_stats(proprio: np.ndarray, actions: np.ndarray, audio: np.ndarray) -> NormStats:
    """Fit statistics on stacked training rows (``proprio`` and ``actions`` are 2-D)."""
    p_mean, p_std = zscore_stats(proprio)
    a_mean, a_std = zscore_stats(actions)
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    au_mean, au_std = zscore_stats(audio[:, None])
    actions = np.asarray(actions, dtype=np.float64)
    return NormStats(proprio_mean=p_mean, proprio_std=p_std, action_mean=a_mean, action_std=a_std,
                     action_min=actions.min(axis=0), action_max=actions.max(axis=0),
                     audio_mean=float(au_mean[0]), audio_std=float(au_std[0]))


def normalize_actions(actions, stats: NormStats) -> np.ndarray:
    return apply_norm(actions, stats.action_center, stats.action_scale)


def denormalize_actions(actions, stats: NormStats) -> np.ndarray:
    return invert_norm(actions, stats.action_center, stats.action_scale)
