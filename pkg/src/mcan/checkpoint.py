"""Tensor file format used for model checkpoints and cue dumps.

Layout::

    b"MCANTNSR"                    8-byte magic
    header length                  u64, little-endian
    header                         UTF-8 JSON: {"config", "meta", "tensors": [manifest]}
    payload                        float32 little-endian tensors, manifest order

Each manifest entry is ``{"name", "shape", "offset", "nbytes"}`` with ``offset``
relative to the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import MCAN, BackboneConfig

MAGIC = b"MCANTNSR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().to(torch.float32).numpy()
    a = np.asarray(t, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    return a if a.flags.c_contiguous else a.copy(order="C")


def encode_tensors(tensors: dict, config: dict | None = None, meta: dict | None = None) -> bytes:
    arrays = [(name, _to_f32(t)) for name, t in tensors.items()]
    manifest, offset = [], 0
    for name, a in arrays:
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = {"format": "mcan-tensors", "version": VERSION, "config": config or {},
              "meta": meta or {}, "tensors": manifest}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head] + [a.tobytes() for _, a in arrays])


def decode_tensors(data: bytes, path: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if not data.startswith(MAGIC) or len(data) < 16:
        raise CheckpointError(f"{path}: not an mcan tensor file")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise CheckpointError(f"{path}: header lacks a tensor manifest")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = memoryview(data)[16 + n:]
    tensors = {}
    for entry in header["tensors"]:
        try:
            name, shape, start, nbytes = entry["name"], entry["shape"], entry["offset"], entry["nbytes"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed manifest entry {entry!r}") from exc
        if start < 0 or start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} truncated")
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise CheckpointError(f"{path}: tensor {name!r} shape {shape} does not match {nbytes} bytes")
        a = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = a.copy()
    return header, tensors


def save_tensors(path, tensors: dict, config: dict | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_tensors(tensors, config, meta))


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: no such file")
    return decode_tensors(p.read_bytes(), str(p))


def save_model(model: MCAN, path: str | os.PathLike, meta: dict | None = None) -> None:
    state = model.state_dict()
    save_tensors(path, state, config=model.cfg.to_dict(), meta=meta)


def load_model(path: str | os.PathLike) -> tuple[MCAN, dict]:
    """Rebuild a model from a checkpoint; returns (model, header meta)."""
    header, tensors = load_tensors(path)
    try:
        cfg = BackboneConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from exc
    model = MCAN(cfg)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    try:
        missing, unexpected = model.load_state_dict(state, strict=False)
    except RuntimeError as exc:  # shape mismatch
        raise CheckpointError(f"{path}: {exc}") from exc
    if missing or unexpected:
        raise CheckpointError(f"{path}: state mismatch (missing={missing}, unexpected={unexpected})")
    return model, header["meta"]
