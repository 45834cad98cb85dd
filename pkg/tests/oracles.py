"""Reference computations shared by the unit tests and the acceptance run."""

from __future__ import annotations

import numpy as np
import torch

from hapfuse.config import FUSION_MODES
from hapfuse.diffusion import DiffusionPolicy, NoiseSchedule, bc_loss

from conftest import tiny_config


def central_difference(f, tensor: torch.Tensor, index: tuple, h: float = 1e-5) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``tensor[index]``.

    A small step keeps the probe from straddling ReLU and max-pool kinks.
    """
    with torch.no_grad():
        old = tensor[index].item()
        tensor[index] = old + h
        plus = float(f())
        tensor[index] = old - h
        minus = float(f())
        tensor[index] = old
    return (plus - minus) / (2.0 * h)


GRAD_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Max-norm relative error of a sampled gradient block.

    The denominator is floored so blocks whose true gradient is exactly zero
    (key biases under softmax) are judged on difference-quotient roundoff.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def sample_indices(tensor: torch.Tensor, n: int, rng: np.random.Generator) -> list[tuple]:
    flat = rng.choice(tensor.numel(), size=min(n, tensor.numel()), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, tensor.shape)) for f in flat]


def random_setup(seed: int):
    """A random small float64 policy, batch and config for gradient checks."""
    rng = np.random.default_rng(seed)
    mode = FUSION_MODES[seed % len(FUSION_MODES)]
    D = int(rng.choice([4, 8]))
    heads = int(rng.choice([1, 2]))
    n_obs = int(rng.integers(1, 4))
    cfg = tiny_config(pipeline={"n_obs": n_obs, "n_points": 6, "n_mels": 5, "window": 3},
                      model={"D": D, "heads": heads, "fusion": mode, "H": 2, "N_a": 2, "K": 10})
    torch.manual_seed(seed)
    policy = DiffusionPolicy(cfg, cfg.world.proprio_dim, cfg.world.action_dim, mode).double()
    with torch.no_grad():
        for p in policy.parameters():
            p.normal_(0.0, 0.4)
    b = 2
    p = cfg.pipeline
    gen = torch.Generator().manual_seed(seed)
    batch = {
        "audio": torch.randn(b, n_obs, p.window, p.n_mels, generator=gen, dtype=torch.float64),
        "points": torch.randn(b, n_obs, p.n_points, 3, generator=gen, dtype=torch.float64),
        "proprio": torch.randn(b, n_obs, cfg.world.proprio_dim, generator=gen, dtype=torch.float64),
        "actions": torch.randn(b, cfg.model.horizon, cfg.world.action_dim, generator=gen,
                               dtype=torch.float64),
    }
    return cfg, policy, batch


def gradient_check(seed: int, per_block: int = 4) -> dict[str, float]:
    """Worst relative error per (objective, block) for one random configuration."""
    cfg, policy, batch = random_setup(seed)
    schedule = NoiseSchedule.from_config(cfg)
    rng = np.random.default_rng(seed + 1)

    def z_norm():
        return policy.encode(batch["audio"], batch["points"], batch["proprio"]).pow(2).sum()

    def loss():
        return bc_loss(policy, batch, schedule, torch.Generator().manual_seed(seed))

    inputs = {name: batch[name] for name in ("audio", "points", "proprio")}
    blocks = dict(inputs)
    for group, params in policy.parameter_groups().items():
        for i, param in enumerate(params):
            blocks[f"{group}[{i}]"] = param

    errors = {}
    for name, objective in (("z", z_norm), ("bc_loss", loss)):
        for t in blocks.values():
            t.requires_grad_(True)
            t.grad = None
        objective().backward()
        for block, tensor in blocks.items():
            if name == "z" and block.startswith("denoiser"):
                continue
            grad = tensor.grad if tensor.grad is not None else torch.zeros_like(tensor)
            idx = sample_indices(tensor, per_block, rng)
            analytic = np.array([grad[i].item() for i in idx])
            numeric = np.array([central_difference(objective, tensor.data, i) for i in idx])
            errors[f"{name}:{block}"] = relative_error(analytic, numeric)
        for t in inputs.values():
            t.requires_grad_(False)
    return errors
