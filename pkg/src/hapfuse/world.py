"""Physics-lite pouring and latch worlds with audible-but-invisible task state.

Pouring: a source cup held by the hand is tilted over an opaque target
container. Liquid flows once the tilt passes a threshold, and the flow sings
at a resonance frequency that rises linearly with the target's fill level.
The point cloud never shows the liquid.

Latch: the gripper grabs a cabinet door handle and swings the door shut. The
handle leaves the camera crop before the door closes; the only completion
cue is a broadband click written into the audio exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .config import WorldConfig
from .seeding import generator

SOURCE_RADIUS = 0.03
SOURCE_HEIGHT = 0.08
HAND_CENTER = np.array([0.0, -0.04, -0.04])
HAND_HALF = np.array([0.015, 0.01, 0.03])
POUR_POSITION_OFFSET = np.array([0.0, -0.05, 0.10])
START_OFFSET = np.array([0.0, -0.10, 0.05])
TABLE_HALF = 0.3

HINGE_XY = np.array([-0.125, -0.388])
HANDLE_Z = 0.15
DOOR_HEIGHT = 0.30
CABINET_BASE_RADIUS = 0.15

# Expert stops pouring once the remaining fill error drops below this
# fraction of the deadband.
EXPERT_STOP_FRACTION = 0.2
EXPERT_TILT_GAIN = 3.0
EXPERT_ARRIVE_TOL = 0.002

POUR_HIDDEN_FIELDS = ("tilt_angle", "fill_level", "spilled", "px", "py", "pz",
                      "qw", "qx", "qy", "qz", "time_step", "flow_coeff", "audio_phase")
LATCH_HIDDEN_FIELDS = ("door_position", "base_displacement", "base_rotation",
                       "click_emitted", "px", "py", "pz", "qw", "qx", "qy", "qz",
                       "gripper_closed", "time_step")


def quat_about_x(angle: float) -> np.ndarray:
    return np.array([math.cos(angle / 2.0), math.sin(angle / 2.0), 0.0, 0.0])


def rotation_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def resonance_frequency(fill: float, cfg: WorldConfig) -> float:
    return cfg.f_min + fill * (cfg.f_max - cfg.f_min)


def noise_std(cfg: WorldConfig) -> float:
    if math.isinf(cfg.snr_db):
        return 0.0
    return cfg.tone_amp / math.sqrt(2.0) * 10.0 ** (-cfg.snr_db / 20.0)


# --------------------------------------------------------------------------
# states


@dataclass(frozen=True)
class PourState:
    tilt_angle: float
    fill_level: float
    spilled: bool
    ee_pose: np.ndarray
    container_params: dict[str, float]
    time_step: int = 0
    flow_coeff: float = 0.5
    audio_phase: float = 0.0

    def to_row(self) -> np.ndarray:
        return np.concatenate([[self.tilt_angle, self.fill_level, float(self.spilled)],
                               self.ee_pose,
                               [self.time_step, self.flow_coeff, self.audio_phase]])

    @classmethod
    def from_row(cls, row: np.ndarray, container_params: dict[str, float]) -> "PourState":
        row = np.asarray(row, dtype=np.float64)
        return cls(tilt_angle=float(row[0]), fill_level=float(row[1]), spilled=bool(row[2] > 0.5),
                   ee_pose=row[3:10].copy(), container_params=dict(container_params),
                   time_step=int(round(row[10])), flow_coeff=float(row[11]),
                   audio_phase=float(row[12]))


@dataclass(frozen=True)
class LatchState:
    door_position: float
    base_displacement: float
    base_rotation: float
    click_emitted: bool
    ee_pose: np.ndarray
    gripper_closed: bool
    time_step: int = 0

    def to_row(self) -> np.ndarray:
        return np.concatenate([[self.door_position, self.base_displacement, self.base_rotation,
                                float(self.click_emitted)], self.ee_pose,
                               [float(self.gripper_closed), self.time_step]])

    @classmethod
    def from_row(cls, row: np.ndarray, container_params: dict[str, float] | None = None) -> "LatchState":
        row = np.asarray(row, dtype=np.float64)
        return cls(door_position=float(row[0]), base_displacement=float(row[1]),
                   base_rotation=float(row[2]), click_emitted=bool(row[3] > 0.5),
                   ee_pose=row[4:11].copy(), gripper_closed=bool(row[11] > 0.5),
                   time_step=int(round(row[12])))


@dataclass
class Episode:
    """One trajectory: per-step sensor streams, actions and hidden states.

    ``hidden`` row ``t`` is the simulator state when observation ``t`` was
    taken; ``final_hidden`` is the state after the last action executed.
    """

    task_id: str
    seed: int
    waveform: np.ndarray  # L x block_size
    pointclouds: np.ndarray  # L x K x 3
    proprio: np.ndarray  # L x D_s
    actions: np.ndarray  # L x D_a
    hidden: np.ndarray  # L x F
    final_hidden: np.ndarray  # F
    container_params: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def state_at(self, t: int):
        row = self.final_hidden if t == len(self) else self.hidden[t]
        cls = PourState if self.task_id == "pour" else LatchState
        return cls.from_row(row, self.container_params)

    def final_state(self):
        return self.state_at(len(self))

    def states(self) -> list:
        return [self.state_at(t) for t in range(len(self))]


# --------------------------------------------------------------------------
# rendering


def _sample_frustum(rng: np.random.Generator, n: int, r_bottom: float, r_top: float,
                    height: float) -> np.ndarray:
    """Uniform samples on a frustum's side wall plus its bottom disk."""
    slant = math.hypot(height, r_top - r_bottom)
    side_area = math.pi * (r_bottom + r_top) * slant
    bottom_area = math.pi * r_bottom * r_bottom
    n_side = int(round(n * side_area / (side_area + bottom_area)))
    n_bottom = n - n_side
    # area element grows linearly with the local radius
    u = rng.random(n_side)
    if abs(r_top - r_bottom) < 1e-12:
        s = u
    else:
        r2 = r_bottom ** 2 + u * (r_top ** 2 - r_bottom ** 2)
        s = (np.sqrt(r2) - r_bottom) / (r_top - r_bottom)
    radius = r_bottom + s * (r_top - r_bottom)
    theta = rng.random(n_side) * 2.0 * math.pi
    side = np.stack([radius * np.cos(theta), radius * np.sin(theta), s * height], axis=1)
    rb = r_bottom * np.sqrt(rng.random(n_bottom))
    tb = rng.random(n_bottom) * 2.0 * math.pi
    bottom = np.stack([rb * np.cos(tb), rb * np.sin(tb), np.zeros(n_bottom)], axis=1)
    return np.concatenate([side, bottom], axis=0)


def _sample_box(rng: np.random.Generator, n: int, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face = rng.choice(6, size=n, p=np.repeat(areas, 2) / (2 * areas.sum()))
    pts = (rng.random((n, 3)) * 2.0 - 1.0) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts + center


@dataclass(frozen=True)
class PourTemplate:
    target: np.ndarray
    source: np.ndarray  # hand frame
    hand: np.ndarray  # hand frame
    table: np.ndarray


def make_pour_template(cfg: WorldConfig, rng: np.random.Generator) -> PourTemplate:
    k = cfg.render_points
    n_target = int(0.35 * k)
    n_source = int(0.25 * k)
    n_hand = int(0.15 * k)
    n_table = k - n_target - n_source - n_hand
    target = _sample_frustum(rng, n_target, cfg.container_radius_bottom,
                             cfg.container_radius_top, cfg.container_height)
    source = _sample_frustum(rng, n_source, SOURCE_RADIUS, SOURCE_RADIUS, SOURCE_HEIGHT)
    source[:, 2] -= SOURCE_HEIGHT
    hand = _sample_box(rng, n_hand, HAND_CENTER, HAND_HALF)
    table = np.concatenate([(rng.random((n_table, 2)) * 2.0 - 1.0) * TABLE_HALF,
                            np.zeros((n_table, 1))], axis=1)
    return PourTemplate(target, source, hand, table)


def render_pour(state: PourState, template: PourTemplate) -> np.ndarray:
    """Point cloud of the scene; depends on poses only, never on fill level."""
    rot = rotation_x(state.tilt_angle)
    pos = state.ee_pose[:3]
    held = np.concatenate([template.source, template.hand], axis=0) @ rot.T + pos
    return np.concatenate([template.target, held, template.table], axis=0)


@dataclass(frozen=True)
class LatchTemplate:
    door: np.ndarray  # (s along door, z) pairs mapped at render time
    handle: np.ndarray  # offsets around the handle point
    hand: np.ndarray
    base: np.ndarray
    body: np.ndarray


def make_latch_template(cfg: WorldConfig, rng: np.random.Generator) -> LatchTemplate:
    k = cfg.render_points
    n_door, n_handle, n_hand, n_base = int(0.3 * k), int(0.1 * k), int(0.15 * k), int(0.15 * k)
    n_body = k - n_door - n_handle - n_hand - n_base
    door = np.stack([rng.random(n_door) * cfg.door_radius * 0.95,
                     rng.random(n_door) * DOOR_HEIGHT], axis=1)
    handle = _sample_box(rng, n_handle, np.array([0.0, 0.0, 0.0]), np.array([0.008, 0.008, 0.03]))
    hand = _sample_box(rng, n_hand, np.array([0.0, 0.0, 0.03]), np.array([0.02, 0.015, 0.03]))
    rb = CABINET_BASE_RADIUS * np.sqrt(rng.random(n_base))
    tb = rng.random(n_base) * 2.0 * math.pi
    base = np.stack([rb * np.cos(tb), rb * np.sin(tb), np.full(n_base, 0.01)], axis=1)
    base[:, :2] += HINGE_XY + np.array([cfg.door_radius / 2.0, -0.12])
    body = _sample_box(rng, n_body, np.array([HINGE_XY[0] + cfg.door_radius / 2.0,
                                              HINGE_XY[1] - 0.12, DOOR_HEIGHT / 2.0]),
                       np.array([cfg.door_radius / 2.0, 0.11, DOOR_HEIGHT / 2.0]))
    return LatchTemplate(door, handle, hand, base, body)


def door_angle(door_position: float, cfg: WorldConfig) -> float:
    return (1.0 - door_position) * cfg.door_open_angle


def handle_position(door_position: float, cfg: WorldConfig) -> np.ndarray:
    phi = door_angle(door_position, cfg)
    return np.array([HINGE_XY[0] + cfg.door_radius * math.cos(phi),
                     HINGE_XY[1] + cfg.door_radius * math.sin(phi), HANDLE_Z])


def render_latch(state: LatchState, template: LatchTemplate, cfg: WorldConfig) -> np.ndarray:
    phi = door_angle(state.door_position, cfg)
    direction = np.array([math.cos(phi), math.sin(phi)])
    door_xy = HINGE_XY + template.door[:, :1] * direction
    door = np.concatenate([door_xy, template.door[:, 1:]], axis=1)
    handle = template.handle + handle_position(state.door_position, cfg)
    hand = template.hand + state.ee_pose[:3]
    return np.concatenate([door, handle, hand, template.base, template.body], axis=0)


# --------------------------------------------------------------------------
# audio


def synth_tone_block(freq: float, n: int, sr: int, amp: float, phase: float = 0.0) -> tuple[np.ndarray, float]:
    """Constant-frequency sine block continuing from ``phase``; returns (block, next phase)."""
    step = 2.0 * math.pi * freq / sr
    block = amp * np.sin(phase + step * np.arange(n))
    return block, math.fmod(phase + step * n, 2.0 * math.pi)


def pour_audio_block(fill_before: float, fill_after: float, flowing: bool, cfg: WorldConfig,
                     rng: np.random.Generator | None, phase: float) -> tuple[np.ndarray, float]:
    n, sr = cfg.block_size, cfg.sample_rate
    if flowing:
        freq = resonance_frequency(0.5 * (fill_before + fill_after), cfg)
        block, phase = synth_tone_block(freq, n, sr, cfg.tone_amp, phase)
    else:
        block = np.zeros(n)
    sigma = noise_std(cfg)
    if sigma > 0 and rng is not None:
        block = block + sigma * rng.standard_normal(n)
    return block, phase


def latch_audio_block(click: bool, cfg: WorldConfig, rng: np.random.Generator | None) -> np.ndarray:
    n, sr = cfg.block_size, cfg.sample_rate
    block = np.zeros(n)
    sigma = noise_std(cfg)
    if sigma > 0 and rng is not None:
        block += sigma * rng.standard_normal(n)
    if click:
        length = min(n // 2, int(0.02 * sr))
        env = cfg.click_amp * np.exp(-np.arange(length) / (0.003 * sr))
        burst = rng.standard_normal(length) if rng is not None else np.sign(np.sin(np.arange(length) * 2.1))
        start = n // 2
        block[start:start + length] += env * burst
    return block


# --------------------------------------------------------------------------
# dynamics


def clip_action(action: np.ndarray, cfg: WorldConfig) -> tuple[np.ndarray, float]:
    """Clip a delta-pose command; returns (position delta, rotation about the tilt axis)."""
    action = np.nan_to_num(np.asarray(action, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    dpos = np.clip(action[:3], -cfg.pos_bound, cfg.pos_bound)
    qw, qx = action[3], action[4]
    dtheta = 2.0 * math.atan2(qx, qw) if (qw != 0.0 or qx != 0.0) else 0.0
    if dtheta > math.pi:
        dtheta -= 2.0 * math.pi
    return dpos, float(np.clip(dtheta, -cfg.rot_bound, cfg.rot_bound))


def pour_position(cfg: WorldConfig) -> np.ndarray:
    return POUR_POSITION_OFFSET + np.array([0.0, 0.0, cfg.container_height])


def pour_step(state: PourState, action: np.ndarray, cfg: WorldConfig,
              rng: np.random.Generator | None = None,
              template: PourTemplate | None = None):
    """Advance the pouring world by one control step.

    Returns ``(state', audio_block, pointcloud, proprio)``; the point cloud is
    ``None`` when no render template is given.
    """
    dpos, dtheta = clip_action(action, cfg)
    tilt = float(np.clip(state.tilt_angle + dtheta, 0.0, cfg.tilt_max))
    pos = state.ee_pose[:3] + dpos
    volume_scale = cfg.ref_volume / cfg.container_volume()
    rate = state.flow_coeff * max(0.0, tilt - cfg.tilt_threshold) * volume_scale
    flowing = rate > 0.0
    fill = state.fill_level + rate * cfg.dt
    spilled = state.spilled
    if fill > 1.0:
        fill = 1.0
        spilled = True
    if state.fill_level >= 1.0 and flowing:
        spilled = True
    block, phase = pour_audio_block(state.fill_level, fill, flowing, cfg, rng, state.audio_phase)
    new = replace(state, tilt_angle=tilt, fill_level=fill, spilled=spilled,
                  ee_pose=np.concatenate([pos, quat_about_x(tilt)]),
                  time_step=state.time_step + 1, audio_phase=phase)
    cloud = render_pour(new, template) if template is not None else None
    return new, block, cloud, new.ee_pose.copy()


def latch_step(state: LatchState, action: np.ndarray, cfg: WorldConfig,
               rng: np.random.Generator | None = None,
               template: LatchTemplate | None = None):
    """Advance the latch world by one control step (see ``pour_step``)."""
    action = np.asarray(action, dtype=np.float64)
    dpos, _ = clip_action(action[:7], cfg)
    grip = bool(np.nan_to_num(action[7]) > 0.0)
    hand_before = state.ee_pose[:3]
    engaged = grip and np.linalg.norm(hand_before - handle_position(state.door_position, cfg)) <= cfg.grasp_radius
    hand = hand_before + dpos
    door = state.door_position
    disp, rot = state.base_displacement, state.base_rotation
    if engaged:
        rel = hand[:2] - HINGE_XY
        phi = math.atan2(rel[1], rel[0])
        raw = 1.0 - phi / cfg.door_open_angle
        radial = abs(math.hypot(rel[0], rel[1]) - cfg.door_radius)
        mis = math.hypot(radial, hand[2] - HANDLE_Z)
        excess = max(0.0, raw - 1.0) * cfg.door_open_angle * cfg.door_radius
        slip = max(0.0, mis - cfg.misalign_tol)
        disp += excess + cfg.disp_gain * slip
        rot += cfg.rot_gain * slip
        if mis <= cfg.grasp_radius:
            door = float(np.clip(raw, 0.0, 1.0))
    click = door >= 1.0 and not state.click_emitted
    block = latch_audio_block(click, cfg, rng)
    pose = np.concatenate([hand, [1.0, 0.0, 0.0, 0.0]])
    new = LatchState(door_position=door, base_displacement=disp, base_rotation=rot,
                     click_emitted=state.click_emitted or click, ee_pose=pose,
                     gripper_closed=grip, time_step=state.time_step + 1)
    cloud = render_latch(new, template, cfg) if template is not None else None
    return new, block, cloud, latch_proprio(new)


def latch_proprio(state: LatchState) -> np.ndarray:
    return np.concatenate([state.ee_pose, [1.0 if state.gripper_closed else 0.0]])


# --------------------------------------------------------------------------
# experts


def pour_expert(state: PourState, cfg: WorldConfig, target: float | None = None) -> np.ndarray:
    target = cfg.target_fill if target is None else target
    pos = state.ee_pose[:3]
    err_pos = pour_position(cfg) - pos
    fill_err = target - state.fill_level
    if state.spilled or fill_err <= EXPERT_STOP_FRACTION * cfg.expert_deadband:
        desired, dpos = 0.0, np.zeros(3)
    elif np.max(np.abs(err_pos)) > EXPERT_ARRIVE_TOL and state.tilt_angle == 0.0:
        desired, dpos = 0.0, np.clip(err_pos, -cfg.pos_bound, cfg.pos_bound)
    else:
        span = cfg.tilt_max - cfg.tilt_threshold
        desired = cfg.tilt_threshold + min(span, EXPERT_TILT_GAIN * fill_err)
        dpos = np.clip(err_pos, -cfg.pos_bound, cfg.pos_bound)
    dtheta = float(np.clip(desired - state.tilt_angle, -cfg.rot_bound, cfg.rot_bound))
    return np.concatenate([dpos, quat_about_x(dtheta)])


def latch_expert(state: LatchState, cfg: WorldConfig, target: float = 1.0) -> np.ndarray:
    hand = state.ee_pose[:3]
    handle = handle_position(state.door_position, cfg)
    rest = np.array([1.0, 0.0, 0.0, 0.0])
    if state.click_emitted or state.door_position >= target:
        # release, then lift clear of the handle
        lift = np.array([0.0, 0.0, cfg.pos_bound]) if not state.gripper_closed and hand[2] < HANDLE_Z + 0.06 else np.zeros(3)
        return np.concatenate([lift, rest, [-1.0]])
    err = handle - hand
    if not state.gripper_closed:
        if np.max(np.abs(err)) > EXPERT_ARRIVE_TOL:
            return np.concatenate([np.clip(err, -cfg.pos_bound, cfg.pos_bound), rest, [-1.0]])
        return np.concatenate([err, rest, [1.0]])
    # swing along the door arc with bounded chord length
    max_step = cfg.pos_bound / (cfg.door_radius * cfg.door_open_angle)
    nxt = min(target, state.door_position + max_step)
    return np.concatenate([handle_position(nxt, cfg) - hand, rest, [1.0]])


def scripted_expert(state, cfg: WorldConfig, target: float | None = None) -> np.ndarray:
    if isinstance(state, PourState):
        return pour_expert(state, cfg, target)
    return latch_expert(state, cfg, 1.0 if target is None else target)


# --------------------------------------------------------------------------
# worlds


class PourWorld:
    """Stateful wrapper holding one episode's random streams and render template."""

    task_id = "pour"

    def __init__(self, cfg: WorldConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        init = generator(seed, "world.init")
        self.template = make_pour_template(cfg, generator(seed, "world.render"))
        self.audio_rng = generator(seed, "world.audio")
        fill0 = float(init.uniform(cfg.init_fill_min, cfg.init_fill_max))
        flow = cfg.flow_coeff * float(init.uniform(1.0 - cfg.flow_jitter, 1.0 + cfg.flow_jitter))
        start = pour_position(cfg) + START_OFFSET + init.uniform(-0.02, 0.02, size=3)
        self.state = PourState(tilt_angle=0.0, fill_level=fill0, spilled=False,
                               ee_pose=np.concatenate([start, quat_about_x(0.0)]),
                               container_params=cfg.container_params(), time_step=0,
                               flow_coeff=flow, audio_phase=0.0)
        self.initial_state = self.state

    def observe_initial(self):
        block, _ = pour_audio_block(self.state.fill_level, self.state.fill_level, False, self.cfg,
                                    self.audio_rng, 0.0)
        return block, render_pour(self.state, self.template), self.state.ee_pose.copy()

    def step(self, action):
        self.state, block, cloud, proprio = pour_step(self.state, action, self.cfg,
                                                      self.audio_rng, self.template)
        return block, cloud, proprio

    def expert_action(self) -> np.ndarray:
        return pour_expert(self.state, self.cfg)

    def success(self) -> bool:
        return (not self.state.spilled
                and abs(self.state.fill_level - self.cfg.target_fill) <= self.cfg.expert_deadband)

    def episode_meta(self) -> dict:
        return {"initial_fill": self.initial_state.fill_level, "flow_coeff": self.state.flow_coeff,
                "hidden_fields": list(POUR_HIDDEN_FIELDS)}


class LatchWorld:
    task_id = "latch"

    def __init__(self, cfg: WorldConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        init = generator(seed, "world.init")
        self.template = make_latch_template(cfg, generator(seed, "world.render"))
        self.audio_rng = generator(seed, "world.audio")
        door0 = float(init.uniform(0.0, cfg.init_door_max))
        start = handle_position(door0, cfg) + np.array([0.05, 0.08, 0.06]) + init.uniform(-0.02, 0.02, size=3)
        self.state = LatchState(door_position=door0, base_displacement=0.0, base_rotation=0.0,
                                click_emitted=False,
                                ee_pose=np.concatenate([start, [1.0, 0.0, 0.0, 0.0]]),
                                gripper_closed=False, time_step=0)
        self.initial_state = self.state

    def observe_initial(self):
        return (latch_audio_block(False, self.cfg, self.audio_rng),
                render_latch(self.state, self.template, self.cfg), latch_proprio(self.state))

    def step(self, action):
        self.state, block, cloud, proprio = latch_step(self.state, action, self.cfg,
                                                       self.audio_rng, self.template)
        return block, cloud, proprio

    def expert_action(self) -> np.ndarray:
        return latch_expert(self.state, self.cfg)

    def success(self) -> bool:
        return self.state.door_position >= 1.0 and self.state.base_displacement < 1e-3

    def episode_meta(self) -> dict:
        return {"initial_door": self.initial_state.door_position,
                "hidden_fields": list(LATCH_HIDDEN_FIELDS)}


def make_world(cfg: WorldConfig, seed: int):
    return PourWorld(cfg, seed) if cfg.task == "pour" else LatchWorld(cfg, seed)


def run_episode(world, act: Callable | None = None, max_steps: int | None = None,
                on_step: Callable | None = None) -> Episode:
    """Roll a world forward, recording every stream.

    ``act(world, t, history)`` returns the next action; the default is the
    scripted expert. ``history`` holds the (audio, cloud, proprio) frames seen
    so far, newest last.
    """
    cfg = world.cfg
    steps = cfg.episode_length if max_steps is None else int(max_steps)
    blocks, clouds, props, actions, hidden = [], [], [], [], []
    obs = world.observe_initial()
    history = [obs]
    for t in range(steps):
        hidden.append(world.state.to_row())
        blocks.append(obs[0])
        clouds.append(obs[1])
        props.append(obs[2])
        action = world.expert_action() if act is None else np.asarray(act(world, t, history), dtype=np.float64)
        actions.append(action)
        obs = world.step(action)
        history.append(obs)
        if on_step is not None:
            on_step(t, world)
    k = cfg.render_points
    n_fields = len(POUR_HIDDEN_FIELDS if world.task_id == "pour" else LATCH_HIDDEN_FIELDS)
    return Episode(
        task_id=world.task_id,
        seed=world.seed,
        waveform=np.asarray(blocks, dtype=np.float32).reshape(steps, cfg.block_size),
        pointclouds=np.asarray(clouds, dtype=np.float32).reshape(steps, k, 3),
        proprio=np.asarray(props, dtype=np.float32).reshape(steps, cfg.proprio_dim),
        actions=np.asarray(actions, dtype=np.float32).reshape(steps, cfg.action_dim),
        hidden=np.asarray(hidden, dtype=np.float64).reshape(steps, n_fields),
        final_hidden=world.state.to_row().astype(np.float64),
        container_params=cfg.container_params(),
        meta=world.episode_meta(),
    )


# --------------------------------------------------------------------------
# container variants

# (height, radius_top, radius_bottom, f_min, f_max); variant 4 is an inverted
# frustum (wide mouth, narrow base) with the largest acoustic shift.
CONTAINER_VARIANTS: dict[int, tuple[float, float, float, float, float]] = {
    1: (0.11, 0.036, 0.036, 320.0, 940.0),
    2: (0.09, 0.038, 0.034, 280.0, 860.0),
    3: (0.12, 0.033, 0.033, 340.0, 1000.0),
    4: (0.10, 0.048, 0.026, 380.0, 1150.0),
}


def shift_container(cfg: WorldConfig, variant_id: int) -> WorldConfig:
    if variant_id not in CONTAINER_VARIANTS:
        raise ValueError(f"unknown container variant {variant_id!r}; expected one of 1..4")
    height, r_top, r_bottom, f_min, f_max = CONTAINER_VARIANTS[variant_id]
    return replace(cfg, container_height=height, container_radius_top=r_top,
                   container_radius_bottom=r_bottom, f_min=f_min, f_max=f_max)


# --------------------------------------------------------------------------
# expert datasets

MAX_ATTEMPTS_PER_EPISODE = 8


def _expert_episode(args: tuple[WorldConfig, int, int]) -> tuple[int, Episode | None, int]:
    cfg, seed, index = args
    from .seeding import derive_seed

    for attempt in range(MAX_ATTEMPTS_PER_EPISODE):
        world = make_world(cfg, derive_seed(seed, "world.episode", index, attempt))
        episode = run_episode(world)
        if world.success():
            return index, episode, attempt + 1
    return index, None, MAX_ATTEMPTS_PER_EPISODE


def generate_episodes(cfg: WorldConfig, n_episodes: int, seed: int) -> list[Episode]:
    """Successful scripted-expert episodes; failures are regenerated with perturbed seeds."""
    from .parallel import parallel_map

    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    results = parallel_map(_expert_episode, [(cfg, seed, i) for i in range(n_episodes)])
    attempts = sum(r[2] for r in results)
    if any(r[1] is None for r in results) or n_episodes / attempts < 0.5:
        raise RuntimeError(f"scripted expert success rate {n_episodes}/{attempts} is below 50%; "
                           "check the world configuration")
    return [r[1] for r in results]


def generate_dataset(cfg: WorldConfig, n_episodes: int, seed: int, out_dir) -> dict:
    """Write ``n_episodes`` expert episodes plus a manifest under ``out_dir``."""
    from pathlib import Path

    from .config import RunConfig
    from .storage import write_episode, write_manifest

    episodes = generate_episodes(cfg, n_episodes, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, episode in enumerate(episodes):
        name = f"ep_{i:04d}"
        write_episode(out / name, episode)
        names.append(name)
    text = RunConfig(world=cfg).to_text().split("\n\n")[0] + "\n"
    return write_manifest(out, cfg.task, names, [len(e) for e in episodes],
                          [e.seed for e in episodes], text)
