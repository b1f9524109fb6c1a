"""Versioned checkpoint container.

Layout: 8-byte magic, uint32 version, uint64 header length, a UTF-8 JSON
header, then the raw little-endian float32 arrays back to back. The header
echoes the model config, lists each array's name/shape/offset and carries
the sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .fusion import CompletionModel, FusionConfig

MAGIC = b"MMCKPT\x00\x01"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> str:
    """Write a checkpoint and return the sha256 of the whole file."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps(
        {"format_version": VERSION, "config": config, "meta": meta or {}, "arrays": entries,
         "sha256": hashlib.sha256(payload).hexdigest()},
        sort_keys=True,
    ).encode()
    blob = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + payload
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load_arrays(path, expected_config: dict | None = None):
    """Return (arrays, config, meta); verifies magic, version, hash and config."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20 : 20 + hlen])
    payload = blob[20 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    if expected_config is not None and expected_config != header["config"]:
        diff = sorted(k for k in set(expected_config) | set(header["config"])
                      if expected_config.get(k) != header["config"].get(k))
        raise CheckpointError(f"{path}: config mismatch on {diff}")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header["config"], header["meta"]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_model(path, model: CompletionModel, optimizer: torch.optim.Optimizer | None = None,
               meta: dict | None = None) -> str:
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        steps = {}
        for p, st in optimizer.state.items():
            name = names[id(p)]
            arrays[f"optim.{name}.exp_avg"] = st["exp_avg"].cpu().numpy()
            arrays[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            steps[name] = float(st["step"])
        meta["optim_steps"] = steps
    return save_arrays(path, arrays, model.config.to_dict(), meta)


def load_model(path, expected_config: FusionConfig | None = None,
               optimizer_factory=None):
    """Rebuild a model (and optionally its Adam state) from a checkpoint.

    Returns (model, optimizer or None, meta).
    """
    arrays, config, meta = load_arrays(path, expected_config.to_dict() if expected_config else None)
    model = CompletionModel(FusionConfig.from_dict(config))
    state = {k: torch.from_numpy(v) for k, v in arrays.items() if not k.startswith("optim.")}
    model.load_state_dict(state, strict=True)
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model.parameters())
        steps = meta.get("optim_steps", {})
        for name, p in model.named_parameters():
            if name in steps:
                optimizer.state[p] = {
                    "step": torch.tensor(steps[name]),
                    "exp_avg": torch.from_numpy(arrays[f"optim.{name}.exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(arrays[f"optim.{name}.exp_avg_sq"]),
                }
    return model, optimizer, meta
