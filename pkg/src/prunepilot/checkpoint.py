"""Bit-exact snapshots of prunable state, in memory and on disk.

File layout: 8-byte magic, u64-LE header length, UTF-8 JSON header
(format version, model config, named tensor index with shape/dtype/byte
offset), then raw tensor payloads. Weights are little-endian IEEE-754
binary32; masks are one byte per element, 0 or 1. Offsets are relative
to the end of the header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelGraph

MAGIC = b"PRNCKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """In-memory copy of all prunable weights and masks plus run scalars."""

    config: ModelConfig
    weights: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    ppl_at_checkpoint: float
    iteration: int


def save_checkpoint(graph: ModelGraph, ppl: float, iteration: int = 0) -> Checkpoint:
    return Checkpoint(
        config=ModelConfig(**graph.config.to_dict()),
        weights={l.name: l.weights.copy() for l in graph.layers},
        masks={l.name: l.mask.copy() for l in graph.layers},
        ppl_at_checkpoint=float(ppl),
        iteration=int(iteration),
    )


def restore_checkpoint(graph: ModelGraph, checkpoint: Checkpoint) -> None:
    """Copy the snapshot back into the graph, byte for byte."""
    if graph.config != checkpoint.config:
        raise ValueError(
            "checkpoint config does not match model config: "
            f"{checkpoint.config} vs {graph.config}"
        )
    for layer in graph.layers:
        if layer.name not in checkpoint.weights:
            raise ValueError(f"checkpoint is missing layer {layer.name!r}")
        layer.weights[...] = checkpoint.weights[layer.name]
        layer.mask[...] = checkpoint.masks[layer.name]


def write_checkpoint_file(checkpoint: Checkpoint, path: str | Path) -> None:
    """Serialize to the binary container (binary32 weights, u8 masks)."""
    if checkpoint.config.precision_mode != "standard32":
        raise ValueError(
            "file checkpoints store binary32 payloads; "
            f"cannot losslessly save precision_mode={checkpoint.config.precision_mode!r}"
        )
    tensors: list[dict] = []
    payloads: list[bytes] = []
    offset = 0

    def add(name: str, arr: np.ndarray, kind: str) -> None:
        nonlocal offset
        dt = "<f4" if kind == "weights" else "u1"
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dt)).tobytes()
        tensors.append(
            {
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)

    for name in checkpoint.weights:
        add(f"{name}.weights", checkpoint.weights[name], "weights")
        add(f"{name}.mask", checkpoint.masks[name], "mask")

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": checkpoint.config.to_dict(),
        "ppl_at_checkpoint": checkpoint.ppl_at_checkpoint,
        "iteration": checkpoint.iteration,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)


def read_checkpoint_file(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint container (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {header.get('format_version')}")
    payload_start = header_start + header_len

    weights: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        start = payload_start + t["offset"]
        raw = blob[start : start + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise ValueError(f"truncated payload for tensor {t['name']!r}")
        dt = np.dtype("<f4") if t["kind"] == "weights" else np.dtype("u1")
        arr = np.frombuffer(raw, dtype=dt).reshape(t["shape"]).copy()
        base, _, suffix = t["name"].rpartition(".")
        if suffix == "weights":
            weights[base] = arr
        elif suffix == "mask":
            masks[base] = arr
        else:
            raise ValueError(f"unexpected tensor name {t['name']!r}")

    return Checkpoint(
        config=ModelConfig(**header["model_config"]),
        weights=weights,
        masks=masks,
        ppl_at_checkpoint=float(header["ppl_at_checkpoint"]),
        iteration=int(header["iteration"]),
    )
