import numpy as np
import pytest
import torch

from hapfuse.config import RunConfig

torch.set_num_threads(1)


def tiny_config(task: str = "pour", **sections) -> RunConfig:
    """Small model and pipeline sizes that keep unit tests fast."""
    base = {
        "world": {"task": task},
        "pipeline": {"n_points": 16, "n_mels": 8, "window": 4, "n_obs": 2},
        "model": {"D": 8, "audio_channels": 4, "point_widths": (8, 8), "proprio_hidden": 8,
                  "denoiser_hidden": 16, "denoiser_blocks": 1, "time_embed": 8, "K": 10,
                  "K_infer": 5, "transformer_layers": 1},
        "train": {"steps": 4, "batch": 4, "warmup": 2, "checkpoint_every": 2},
    }
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    return RunConfig().with_(**base).validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
