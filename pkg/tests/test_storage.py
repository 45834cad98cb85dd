import struct

import numpy as np
import pytest

from hapfuse.config import WorldConfig
from hapfuse.storage import (ARRAY_HEADER, FormatError, directory_digest, load_checkpoint,
                             load_dataset, read_array, read_episode, save_checkpoint, write_array,
                             write_episode)
from hapfuse.world import PourWorld, generate_dataset, run_episode


def test_array_header_layout(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_array(tmp_path / "a.mmep", a)
    raw = (tmp_path / "a.mmep").read_bytes()
    assert ARRAY_HEADER.size == 16
    magic, version, rank, *dims = struct.unpack("<4sHH4H", raw[:16])
    assert (magic, version, rank, dims) == (b"MMEP", 1, 3, [2, 3, 4, 0])
    assert raw[16:] == a.astype("<f4").tobytes()
    np.testing.assert_array_equal(read_array(tmp_path / "a.mmep"), a)


def test_array_rejects_bad_input(tmp_path):
    with pytest.raises(FormatError):
        write_array(tmp_path / "x.mmep", np.zeros((1, 1, 1, 1, 1)))
    (tmp_path / "bad.mmep").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FormatError):
        read_array(tmp_path / "bad.mmep")


def test_episode_round_trip_is_bit_exact(tmp_path):
    ep = run_episode(PourWorld(WorldConfig(), 11), max_steps=20)
    write_episode(tmp_path / "ep", ep)
    back = read_episode(tmp_path / "ep")
    for name in ("waveform", "pointclouds", "proprio", "actions"):
        assert getattr(back, name).tobytes() == getattr(ep, name).tobytes()
    np.testing.assert_array_equal(back.hidden, ep.hidden.astype(np.float32))
    assert back.task_id == ep.task_id and back.seed == ep.seed
    assert back.container_params == ep.container_params


def test_dataset_digest_and_verify(tmp_path):
    manifest = generate_dataset(WorldConfig(), 2, 5, tmp_path / "d")
    assert manifest["n_episodes"] == 2
    episodes = load_dataset(tmp_path / "d", verify=True)
    assert len(episodes) == 2
    digest = directory_digest(tmp_path / "d")
    (tmp_path / "d" / "run.meta").write_text("timestamps differ")
    assert directory_digest(tmp_path / "d") == digest
    target = tmp_path / "d" / "ep_0000" / "actions.mmep"
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 1
    target.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d", verify=True)


def test_checkpoint_round_trip(tmp_path):
    arrays = {"w": np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32),
              "b": np.zeros(5, dtype=np.float32), "s": np.array([2.5], dtype=np.float32)}
    save_checkpoint(tmp_path / "c.ckpt", "[model]\nD = 4\n", {"step": 7}, arrays)
    text, meta, back = load_checkpoint(tmp_path / "c.ckpt")
    assert text == "[model]\nD = 4\n" and meta == {"step": 7}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape
    save_checkpoint(tmp_path / "d.ckpt", text, meta, back)
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage!" + bytes(8))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.ckpt")
