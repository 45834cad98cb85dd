import numpy as np
import pytest
import torch

from conftest import tiny_config
from hapfuse.storage import load_checkpoint
from hapfuse.training import (DatasetMismatch, FeatureSet, build_features, ema, encoder_arrays, fit_stats,
                              learning_rate, load_features, pretrain_audio_proprio,
                              read_policy_checkpoint, train, write_policy_checkpoint)
from hapfuse.world import generate_dataset, generate_episodes


@pytest.fixture(scope="module")
def feats():
    cfg = tiny_config()
    return build_features(generate_episodes(cfg.world, 2, 0), cfg)


def test_feature_shapes(feats):
    cfg = tiny_config()
    p = cfg.pipeline
    n = int(feats.lengths.sum())
    assert feats.audio.shape == (n, p.window, p.n_mels)
    assert feats.points.shape == (n, p.n_points, 3)
    assert feats.actions.shape == (n, cfg.world.action_dim)
    obs, chunk = feats.sample_indices(p.n_obs, cfg.model.horizon)
    assert obs.shape == (n, p.n_obs) and chunk.shape == (n, cfg.model.horizon)
    start = int(feats.starts[1])
    # repeat-first padding for frames, repeat-last padding for chunks
    assert list(obs[start]) == [start] * p.n_obs
    end = start + int(feats.lengths[1]) - 1
    assert list(chunk[end]) == [end] * cfg.model.horizon


def test_load_features_matches_in_memory(tmp_path, feats):
    cfg = tiny_config()
    generate_dataset(cfg.world, 2, 0, tmp_path / "d")
    loaded = load_features(tmp_path / "d", cfg)
    assert loaded.actions.tobytes() == feats.actions.tobytes()
    assert loaded.audio.tobytes() == feats.audio.tobytes()


def test_stats_are_float32_exact(feats):
    s = fit_stats(feats)
    assert np.all(s.proprio_std >= 1e-6)
    for v in (s.proprio_mean, s.action_min, np.float64(s.audio_mean)):
        assert np.array_equal(v, np.float32(v).astype(np.float64))


def test_learning_rate_schedule():
    cfg = tiny_config(train={"steps": 100, "warmup": 10, "lr": 1e-3, "min_lr": 1e-5})
    lrs = [learning_rate(s, cfg) for s in range(100)]
    assert lrs[0] < lrs[5] < lrs[9] <= 1e-3
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] >= 1e-5


def test_dataset_mismatch(feats):
    with pytest.raises(DatasetMismatch):
        train(feats, tiny_config("latch"), 0)


def test_training_deterministic(feats):
    cfg = tiny_config()
    a = train(feats, cfg, 3)
    b = train(feats, cfg, 3)
    assert a.losses == b.losses
    for pa, pb in zip(a.policy.parameters(), b.policy.parameters()):
        assert torch.equal(pa, pb)
    c = train(feats, cfg, 4)
    assert c.losses != a.losses


def test_metrics_file_and_checkpoints(tmp_path, feats):
    cfg = tiny_config()
    res = train(feats, cfg, 0, tmp_path / "run")
    lines = (tmp_path / "run" / "metrics.tsv").read_text().splitlines()
    assert len(lines) == cfg.train.steps
    for i, line in enumerate(lines):
        step, loss, lr = line.split("\t")
        assert int(step) == i and float(loss) == res.losses[i]
        assert float(lr) == learning_rate(i, cfg)
    assert (tmp_path / "run" / "step_000002.ckpt").exists()
    ck = read_policy_checkpoint(res.checkpoint)
    assert ck.step == cfg.train.steps and ck.mode == cfg.model.fusion
    for pa, pb in zip(res.policy.parameters(), ck.policy.parameters()):
        assert torch.equal(pa, pb)


def test_resume_reproduces_uninterrupted_run(tmp_path, feats):
    cfg = tiny_config(train={"steps": 6, "checkpoint_every": 3})
    full = train(feats, cfg, 1, tmp_path / "full")
    train(feats, cfg, 1, tmp_path / "part", stop_at=4)
    resumed = train(feats, cfg, 1, tmp_path / "part", resume=tmp_path / "part" / "step_000003.ckpt")
    assert np.max(np.abs(np.array(full.losses) - np.array(resumed.losses))) <= 1e-6
    assert ((tmp_path / "full" / "metrics.tsv").read_text()
            == (tmp_path / "part" / "metrics.tsv").read_text())
    assert (tmp_path / "full" / "policy.ckpt").read_bytes() == (tmp_path / "part" / "policy.ckpt").read_bytes()


def test_checkpoint_rebuilds_from_config_snapshot(tmp_path, feats):
    cfg = tiny_config(model={"fusion": "transformer_maniwav"})
    res = train(feats, cfg, 0)
    path = write_policy_checkpoint(tmp_path / "c.ckpt", cfg, res.policy, res.stats, 4)
    config_text, meta, arrays = load_checkpoint(path)
    assert config_text == cfg.to_text()
    back = read_policy_checkpoint(path)
    assert back.config.digest() == cfg.digest() and back.mode == "transformer_maniwav"
    for name, p in res.policy.state_dict().items():
        assert torch.equal(p, back.policy.state_dict()[name]), name
    assert back.stats.action_min.tobytes() == res.stats.action_min.tobytes()


def test_pretraining_and_encoder_transfer(feats):
    cfg = tiny_config(train={"pretrain_steps": 30})
    policy, losses = pretrain_audio_proprio(feats, cfg, 0, fit_stats(feats))
    assert len(losses) == 30 and ema(losses)[-1] < ema(losses)[0]
    arrays = encoder_arrays(policy)
    res = train(feats, cfg.with_(train={"steps": 1}), 0, init_encoders=arrays)
    assert res.steps == [0]
    empty = FeatureSet(feats.task, feats.audio[:0], feats.points[:0], feats.proprio[:0],
                       feats.actions[:0], [])
    with pytest.raises(ValueError, match="empty"):
        pretrain_audio_proprio(empty, cfg, 0, fit_stats(feats))
    with pytest.raises(ValueError, match="empty"):
        train(empty, cfg, 0)


def test_ema():
    out = ema([1.0, 1.0, 1.0])
    assert np.allclose(out, 1.0)
    assert ema([]).shape == (0,)
