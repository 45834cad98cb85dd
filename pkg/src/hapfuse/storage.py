"""On-disk formats: episode array files, dataset manifests and checkpoints.

Array files (``*.mmep``) hold one little-endian float32 array behind a fixed
16-byte header::

    offset 0   4s   magic b"MMEP"
    offset 4   u16  format version
    offset 6   u16  rank (<= 4)
    offset 8   4u16 dims, unused trailing dims are zero

Checkpoints start with ``b"HAPFCKPT"`` and a u32 version, followed by the
config snapshot, a JSON metadata block and a table of named float32 arrays
with their shape records.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .world import Episode

ARRAY_MAGIC = b"MMEP"
ARRAY_VERSION = 1
ARRAY_HEADER = struct.Struct("<4sHH4H")
MAX_DIM = 0xFFFF

CKPT_MAGIC = b"HAPFCKPT"
CKPT_VERSION = 1

EPISODE_STREAMS = ("waveform", "pointclouds", "proprio", "actions", "hidden", "final")
RUN_META = "run.meta"


class FormatError(ValueError):
    pass


def write_array(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim > 4:
        raise FormatError(f"rank {array.ndim} exceeds 4")
    if any(d > MAX_DIM for d in array.shape):
        raise FormatError(f"dimension too large for array header: {array.shape}")
    dims = list(array.shape) + [0] * (4 - array.ndim)
    with open(path, "wb") as fh:
        fh.write(ARRAY_HEADER.pack(ARRAY_MAGIC, ARRAY_VERSION, array.ndim, *dims))
        fh.write(array.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < ARRAY_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rank, *dims = ARRAY_HEADER.unpack_from(raw)
    if magic != ARRAY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != ARRAY_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shape = tuple(dims[:rank])
    count = int(np.prod(shape)) if rank else 1
    body = raw[ARRAY_HEADER.size:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def write_episode(directory: str | Path, episode: Episode) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    streams = {
        "waveform": episode.waveform,
        "pointclouds": episode.pointclouds,
        "proprio": episode.proprio,
        "actions": episode.actions,
        "hidden": episode.hidden,
        "final": episode.final_hidden[None, :],
    }
    for name, array in streams.items():
        write_array(directory / f"{name}.mmep", array)
    meta = {"task_id": episode.task_id, "seed": episode.seed,
            "container_params": episode.container_params, "meta": episode.meta}
    (directory / "meta.json").write_text(_dumps(meta), encoding="utf-8")


def read_episode(directory: str | Path) -> Episode:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    arrays = {name: read_array(directory / f"{name}.mmep") for name in EPISODE_STREAMS}
    return Episode(task_id=meta["task_id"], seed=int(meta["seed"]), waveform=arrays["waveform"],
                   pointclouds=arrays["pointclouds"], proprio=arrays["proprio"],
                   actions=arrays["actions"], hidden=arrays["hidden"],
                   final_hidden=arrays["final"][0], container_params=meta["container_params"],
                   meta=meta["meta"])


def directory_digest(directory: str | Path, exclude: tuple[str, ...] = (RUN_META,)) -> str:
    """SHA-256 over relative paths and contents of every file (sorted)."""
    directory = Path(directory)
    h = hashlib.sha256()
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        rel = path.relative_to(directory).as_posix()
        if rel in exclude or path.name in exclude:
            continue
        h.update(rel.encode("utf-8") + b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(directory: str | Path, task: str, names: list[str], lengths: list[int],
                   seeds: list[int], config_text: str) -> dict:
    directory = Path(directory)
    (directory / "world.ini").write_text(config_text, encoding="utf-8")
    digest = directory_digest(directory, exclude=(RUN_META, "manifest.json"))
    manifest = {
        "format": "hapfuse-dataset",
        "version": 1,
        "task": task,
        "n_episodes": len(names),
        "total_steps": int(sum(lengths)),
        "episodes": [{"name": n, "length": int(l), "seed": int(s)}
                     for n, l, s in zip(names, lengths, seeds)],
        "digest": digest,
    }
    (directory / "manifest.json").write_text(_dumps(manifest), encoding="utf-8")
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FormatError(f"not a dataset directory (no manifest.json): {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_dataset(directory: str | Path, verify: bool = False) -> list[Episode]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if verify:
        digest = directory_digest(directory, exclude=(RUN_META, "manifest.json"))
        if digest != manifest["digest"]:
            raise FormatError(f"{directory}: content digest mismatch")
    return [read_episode(directory / e["name"]) for e in manifest["episodes"]]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, config_text: str, meta: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for blob in (config_text.encode("utf-8"), _dumps(meta).encode("utf-8")):
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    blobs = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        blobs.append(raw[offset:offset + n].decode("utf-8"))
        offset += n
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + n].decode("utf-8")
        offset += n
        (rank,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
        offset += 4 * size
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return blobs[0], json.loads(blobs[1]), arrays
