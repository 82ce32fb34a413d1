"""Run-directory persistence.

Layout of a run directory::

    <run>/config.toml            flat key = value manifest (written before training)
    <run>/train.log              one loss record per iteration
    <run>/scale_<n>/params.bin   parameters of scale n; its presence marks the scale complete

``params.bin`` is a version line, an 8-byte little-endian header length, a
JSON header describing every tensor, then the raw little-endian tensor bytes.
The encoding carries no timestamps, so equal parameters give equal bytes.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, read_manifest, write_manifest
from .errors import CheckpointError
from .networks import ScaleModule

MAGIC = b"TUIGAN-PARAMS"
FORMAT_VERSION = 1
CONFIG_FILE = "config.toml"
LOG_FILE = "train.log"
PARAMS_FILE = "params.bin"


def scale_dir(run_dir: str | Path, n: int) -> Path:
    return Path(run_dir) / f"scale_{n}"


def encode_state(state: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        array = tensor.detach().cpu().contiguous().numpy()
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        raw = array.tobytes()
        entries.append({"name": name, "dtype": array.dtype.str, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    first_line = MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n"
    return first_line + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode_state(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    first_line, sep, rest = data.partition(b"\n")
    if not sep or not first_line.startswith(MAGIC + b" "):
        raise CheckpointError("not a parameter file (bad magic)")
    version = int(first_line[len(MAGIC) + 1:])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported parameter file version {version}")
    (header_len,) = struct.unpack("<Q", rest[:8])
    header = json.loads(rest[8:8 + header_len])
    body = rest[8 + header_len:]
    state = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.copy())
    return state, header["meta"]


def save_scale(run_dir: str | Path, module: ScaleModule) -> Path:
    """Write ``scale_<n>/params.bin`` via a temporary directory and a rename."""
    final = scale_dir(run_dir, module.scale_index)
    tmp = final.with_name(final.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    meta = {"scale_index": module.scale_index, "frozen": module.frozen}
    (tmp / PARAMS_FILE).write_bytes(encode_state(module.state_dict(), meta))
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def load_scale(run_dir: str | Path, n: int, cfg: TrainConfig) -> ScaleModule:
    path = scale_dir(run_dir, n) / PARAMS_FILE
    if not path.exists():
        raise CheckpointError(f"missing checkpoint for scale {n}", missing_scales=[n])
    state, meta = decode_state(path.read_bytes())
    module = ScaleModule(n, channels=cfg.channels, attention=cfg.attention)
    module.load_state_dict(state)
    if meta.get("frozen", True):
        module.freeze()
    return module


def completed_scales(run_dir: str | Path, N: int) -> list[int]:
    return [n for n in range(N, -1, -1) if (scale_dir(run_dir, n) / PARAMS_FILE).exists()]


def missing_scales(run_dir: str | Path, N: int) -> list[int]:
    return [n for n in range(N, -1, -1) if not (scale_dir(run_dir, n) / PARAMS_FILE).exists()]


def write_config(run_dir: str | Path, cfg: TrainConfig, extra: dict[str, object] | None = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    values = {f"train.{k}": v for k, v in cfg.to_flat().items()}
    for key, value in (extra or {}).items():
        values[key] = value
    path = run_dir / CONFIG_FILE
    write_manifest(path, values)
    return path


def read_config(run_dir: str | Path) -> tuple[TrainConfig, dict[str, object]]:
    path = Path(run_dir) / CONFIG_FILE
    if not path.exists():
        raise CheckpointError(f"{run_dir}: no {CONFIG_FILE} manifest")
    values = read_manifest(path)
    train = {k[len("train."):]: v for k, v in values.items() if k.startswith("train.")}
    extra = {k: v for k, v in values.items() if not k.startswith("train.")}
    return TrainConfig.from_flat(train), extra
