"""Run configuration: sectioned ``key = value`` files with strict validation.

Every hyperparameter the pipeline uses lives here. A config file may set any
subset of keys; everything else keeps its default. Unknown sections or keys
are rejected with an error naming ``section.key``.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

TASKS = ("pour", "latch")
FUSION_MODES = (
    "hierarchical",
    "bbfm_only",
    "imm_only",
    "concat_ps",
    "concat_aps",
    "transformer_maniwav",
)


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration values."""


@dataclass(frozen=True)
class WorldConfig:
    task: str = "pour"
    sample_rate: int = 16000
    control_rate: int = 10
    episode_length: int = 100
    snr_db: float = 20.0
    tone_amp: float = 0.5
    render_points: int = 1024
    pos_bound: float = 0.02
    rot_bound: float = 0.15
    # target container
    container_height: float = 0.10
    container_radius_top: float = 0.035
    container_radius_bottom: float = 0.035
    ref_volume: float = 3.848451000647496e-4
    f_min: float = 300.0
    f_max: float = 900.0
    # pouring dynamics
    tilt_threshold: float = 0.8
    tilt_max: float = 1.6
    flow_coeff: float = 0.5
    flow_jitter: float = 0.3
    init_fill_min: float = 0.1
    init_fill_max: float = 0.5
    target_fill: float = 0.98
    expert_deadband: float = 0.05
    # latch
    door_radius: float = 0.25
    door_open_angle: float = 1.2
    init_door_max: float = 0.3
    grasp_radius: float = 0.03
    misalign_tol: float = 1e-4
    disp_gain: float = 0.5
    rot_gain: float = 2.0
    click_amp: float = 0.8

    @property
    def block_size(self) -> int:
        return self.sample_rate // self.control_rate

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate

    @property
    def action_dim(self) -> int:
        return 7 if self.task == "pour" else 8

    @property
    def proprio_dim(self) -> int:
        return 7 if self.task == "pour" else 8

    def container_params(self) -> dict[str, float]:
        return {
            "height": self.container_height,
            "radius_top": self.container_radius_top,
            "radius_bottom": self.container_radius_bottom,
        }

    def container_volume(self) -> float:
        r1, r2, h = self.container_radius_bottom, self.container_radius_top, self.container_height
        return math.pi * h * (r1 * r1 + r1 * r2 + r2 * r2) / 3.0

    def validate(self) -> None:
        _check(self.task in TASKS, "world.task", f"must be one of {TASKS}")
        _check(self.sample_rate % self.control_rate == 0, "world.sample_rate",
               "must be a multiple of world.control_rate")
        _check(self.episode_length >= 3, "world.episode_length", "must be >= 3")
        _check(self.render_points >= 16, "world.render_points", "must be >= 16")
        _check(self.f_max > self.f_min > 0, "world.f_max", "need f_max > f_min > 0")
        _check(self.f_max < self.sample_rate / 2, "world.f_max", "must be below Nyquist")
        _check(0.0 <= self.init_fill_min <= self.init_fill_max < 1.0, "world.init_fill_max",
               "need 0 <= init_fill_min <= init_fill_max < 1")
        _check(0.0 < self.target_fill <= 1.0, "world.target_fill", "must lie in (0, 1]")
        _check(0.0 < self.expert_deadband < 1.0, "world.expert_deadband", "must lie in (0, 1)")
        _check(0.0 <= self.flow_jitter < 1.0, "world.flow_jitter", "must lie in [0, 1)")
        _check(self.tilt_max > self.tilt_threshold > 0, "world.tilt_max",
               "need tilt_max > tilt_threshold > 0")
        for name in ("container_height", "container_radius_top", "container_radius_bottom",
                     "ref_volume", "flow_coeff", "pos_bound", "rot_bound", "door_radius",
                     "door_open_angle", "grasp_radius"):
            _check(getattr(self, name) > 0, f"world.{name}", "must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    n_mels: int = 64
    window: int = 32
    n_fft: int = 512
    hop: int = 160
    f_lo: float = 100.0
    f_hi: float = 4000.0
    n_points: int = 512
    n_obs: int = 2
    crop_min: tuple[float, float, float] = (-0.30, -0.30, 0.005)
    crop_max: tuple[float, float, float] = (0.30, 0.30, 0.40)
    fps_seed: int = 0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int | None = None) -> None:
        for name in ("n_mels", "window", "n_fft", "hop", "n_points", "n_obs"):
            _check(getattr(self, name) >= 1, f"pipeline.{name}", "must be >= 1")
        _check(self.f_hi > self.f_lo >= 0, "pipeline.f_hi", "need f_hi > f_lo >= 0")
        if sample_rate is not None:
            _check(self.f_hi <= sample_rate / 2, "pipeline.f_hi", "must not exceed Nyquist")
        _check(all(a < b for a, b in zip(self.crop_min, self.crop_max)), "pipeline.crop_max",
               "each crop_max entry must exceed crop_min")
        _check(self.log_floor > 0, "pipeline.log_floor", "must be positive")


@dataclass(frozen=True)
class ModelConfig:
    D: int = 128
    heads: int = 1
    fusion: str = "hierarchical"
    audio_channels: int = 32
    point_widths: tuple[int, ...] = (64, 128, 256)
    proprio_hidden: int = 64
    transformer_layers: int = 2
    K: int = 50
    K_infer: int = 10
    H: int = 7
    N_a: int = 4
    exec_slice: str = "first"
    prediction: str = "epsilon"
    beta_schedule: str = "squaredcos"
    clip_sample: bool = True
    denoiser_hidden: int = 256
    denoiser_blocks: int = 3
    time_embed: int = 64

    @property
    def horizon(self) -> int:
        return self.H + 1

    def validate(self) -> None:
        _check(self.D >= 1, "model.D", "must be >= 1")
        _check(self.heads >= 1 and self.D % self.heads == 0, "model.heads",
               "must be >= 1 and divide model.D")
        _check(self.fusion in FUSION_MODES, "model.fusion", f"must be one of {FUSION_MODES}")
        _check(self.K >= 1, "model.K", "must be >= 1")
        _check(1 <= self.K_infer <= self.K, "model.K_infer", "must lie in [1, model.K]")
        _check(self.H >= 0, "model.H", "must be >= 0")
        _check(1 <= self.N_a <= self.H + 1, "model.N_a", "must lie in [1, H + 1]")
        _check(self.exec_slice in ("first", "last"), "model.exec_slice", "must be first or last")
        _check(self.prediction in ("epsilon", "sample"), "model.prediction",
               "must be epsilon or sample")
        _check(self.beta_schedule in ("squaredcos", "linear"), "model.beta_schedule",
               "must be squaredcos or linear")
        _check(len(self.point_widths) >= 1, "model.point_widths", "needs at least one width")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 64
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup: int = 100
    weight_decay: float = 1e-6
    seed: int = 0
    pretrain: bool = False
    pretrain_steps: int = 500
    lambda_p: float = 1.0
    checkpoint_every: int = 1000
    log_every: int = 1

    def validate(self) -> None:
        _check(self.steps >= 0, "train.steps", "must be >= 0")
        _check(self.batch >= 1, "train.batch", "must be >= 1")
        _check(self.lr > 0, "train.lr", "must be positive")
        _check(self.warmup >= 0, "train.warmup", "must be >= 0")
        _check(self.lambda_p >= 0, "train.lambda_p", "must be >= 0")
        _check(self.checkpoint_every >= 1, "train.checkpoint_every", "must be >= 1")
        _check(self.log_every >= 1, "train.log_every", "must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 20
    seed: int = 1000
    variants: tuple[int, ...] = (1, 2, 3, 4)
    max_steps: int = 0

    def validate(self) -> None:
        _check(self.trials >= 1, "eval.trials", "must be >= 1")
        _check(all(v in (1, 2, 3, 4) for v in self.variants), "eval.variants",
               "entries must be in 1..4")
        _check(self.max_steps >= 0, "eval.max_steps", "must be >= 0 (0 = episode_length)")


@dataclass(frozen=True)
class MIConfig:
    k: int = 3
    d_reduce: int = 8
    n_rollouts: int = 20

    def validate(self) -> None:
        _check(self.k >= 1, "mi.k", "must be >= 1")
        _check(self.d_reduce >= 1, "mi.d_reduce", "must be >= 1")
        _check(self.n_rollouts >= 1, "mi.n_rollouts", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mi: MIConfig = field(default_factory=MIConfig)

    def validate(self) -> "RunConfig":
        self.world.validate()
        self.pipeline.validate(self.world.sample_rate)
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        self.mi.validate()
        return self

    def with_(self, **sections: dict[str, Any]) -> "RunConfig":
        """Return a copy with ``section={key: value}`` overrides applied."""
        updated = {}
        for name, overrides in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section '{name}'")
            current = getattr(self, name)
            for key in overrides:
                if key not in {f.name for f in fields(current)}:
                    raise ConfigError(f"unknown config key '{name}.{key}'")
            updated[name] = replace(current, **overrides)
        return replace(self, **updated)

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "pipeline": PipelineConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "mi": MIConfig,
}


def _check(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"invalid value for '{key}': {message}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for '{key}'") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys like D, K, H are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    if parser.defaults():
        raise ConfigError(f"unknown config key 'DEFAULT.{next(iter(parser.defaults()))}'")
    overrides: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            first = next(iter(parser[section]), None)
            where = f"{section}.{first}" if first else section
            raise ConfigError(f"unknown config key '{where}' (no section '{section}')")
        defaults = {f.name: getattr(SECTIONS[section](), f.name) for f in fields(SECTIONS[section])}
        values = {}
        for key, raw in parser[section].items():
            if key not in defaults:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            values[key] = _parse_value(raw, defaults[key], f"{section}.{key}")
        overrides[section] = values
    return RunConfig().with_(**overrides).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))
