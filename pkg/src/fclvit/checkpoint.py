"""Single-file checkpoints.

Layout::

    b"FCLVITCK"            8-byte magic
    u32 LE                 format version
    u64 LE                 header length H
    H bytes                UTF-8 JSON header
    payload                raw little-endian float64 arrays, back to back

The header records the model config, head class lists, the frozen flag and
backbone checksum, consolidation metadata, and for every array its name,
shape and payload offset. Arrays are written verbatim, so a load reproduces
every value bit for bit.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .ewc import ConsolidationState
from .layers import Linear
from .model import FCLViT, FCLViTConfig, TaskHead
from .tensor import Rng

MAGIC = b"FCLVITCK"
VERSION = 1


def save_checkpoint(path, model: FCLViT, state: ConsolidationState | None = None, extra=None):
    arrays = {n: p.data for n, p in model.named_parameters().items()}
    if state is not None and state.initialized:
        for n, a, f in zip(state.names, state.anchor, state.fisher):
            arrays[f"ewc.anchor.{n}"] = a
            arrays[f"ewc.fisher.{n}"] = f
    index, offset = [], 0
    for name, arr in arrays.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "heads": [{"task_index": h.task_index, "classes": list(h.class_list)} for h in model.heads],
        "frozen": model.frozen,
        "backbone_checksum": model.frozen_checksum,
        "consolidation": None if state is None else {
            "tasks_consolidated": state.tasks_consolidated, "names": list(state.names)},
        "tensors": index,
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hdr)))
        fh.write(hdr)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, ConsolidationState, extra)."""
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if 20 + hlen > len(blob):
        raise FormatError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
        config = FCLViTConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    payload = memoryview(blob)[20 + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start, stop = entry["offset"], entry["offset"] + 8 * n
        if stop > len(payload):
            raise FormatError(f"{path}: tensor {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(shape).copy()

    model = FCLViT(config, Rng(0))
    for h in header["heads"]:
        k = h["task_index"]
        layer = Linear(config.dim, len(h["classes"]), bias=False, init="zeros", name=f"head{k}")
        model.heads.append(TaskHead(k, tuple(h["classes"]), layer))
    params = model.named_parameters()
    for name, p in params.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.shape:
            raise FormatError(f"{path}: tensor {name} has shape {arrays[name].shape}, "
                              f"expected {p.shape}")
        p.data = arrays[name]
    if header["frozen"]:
        model.freeze()
        if header["backbone_checksum"] != model.frozen_checksum:
            raise FormatError(f"{path}: backbone checksum mismatch")

    state = ConsolidationState()
    meta = header.get("consolidation")
    if meta and meta["tasks_consolidated"]:
        state = ConsolidationState(
            names=list(meta["names"]),
            anchor=[arrays[f"ewc.anchor.{n}"] for n in meta["names"]],
            fisher=[arrays[f"ewc.fisher.{n}"] for n in meta["names"]],
            tasks_consolidated=meta["tasks_consolidated"],
        )
    return model, state, header.get("extra", {})
