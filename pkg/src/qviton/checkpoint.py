"""Checkpoint container: a JSON header plus raw little-endian array blobs.

The format is deliberately plain so save -> load -> save is byte-identical:

    bytes 0..3    magic  b"QVCK"
    bytes 4..7    format version, uint32 LE
    bytes 8..15   header length, uint64 LE
    header        canonical JSON (sorted keys, no whitespace)
    data          concatenated raw arrays at the offsets the header declares

The header carries the run config, epoch counter, every RNG state, and the
manifest (name, shape, dtype, offset) for parameters, batch-norm buffers,
and optimizer moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import HybridModel
from .train import AdamW

MAGIC = b"QVCK"
VERSION = 1


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _manifest_and_blob(arrays: list[tuple[str, np.ndarray]], offset: int):
    manifest, chunks = [], []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    return manifest, chunks, offset


@dataclass
class CheckpointData:
    config: dict
    epoch: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    opt_step: int
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    rng: dict[str, dict]


def save_checkpoint(path, *, config: dict, epoch: int, model: HybridModel,
                    optimizer: AdamW, rng_states: dict[str, dict]) -> None:
    """Serialize the full training state; rng_states must include every
    generator whose stream the resumed run has to continue."""
    sections = {}
    offset = 0
    groups = [
        ("params", [(n, t.data) for n, t in model.store.items()]),
        ("buffers", list(model.store.buffers())),
        ("opt_m", [(n, optimizer.m[n]) for n in optimizer.m]),
        ("opt_v", [(n, optimizer.v[n]) for n in optimizer.v]),
    ]
    all_chunks = []
    for key, arrays in groups:
        manifest, chunks, offset = _manifest_and_blob(arrays, offset)
        sections[key] = manifest
        all_chunks.extend(chunks)

    header = _canonical({
        "format_version": VERSION,
        "config": config,
        "epoch": epoch,
        "opt_step": optimizer.step_count,
        "rng": rng_states,
        "sections": sections,
    })
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in all_chunks:
            fh.write(chunk)


def load_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    try:
        header = json.loads(raw[16:16 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    data_start = 16 + header_len

    def read_section(key):
        out = {}
        for entry in header["sections"][key]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = data_start + entry["offset"]
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
            out[entry["name"]] = arr.reshape(entry["shape"]).copy()
        return out

    return CheckpointData(
        config=header["config"],
        epoch=int(header["epoch"]),
        params=read_section("params"),
        buffers=read_section("buffers"),
        opt_step=int(header["opt_step"]),
        opt_m=read_section("opt_m"),
        opt_v=read_section("opt_v"),
        rng=header["rng"],
    )


def restore_model(model: HybridModel, ckpt: CheckpointData) -> None:
    """Copy parameters and buffers back; any name/shape drift is rejected."""
    names = set(model.store.names())
    if names != set(ckpt.params):
        missing = names ^ set(ckpt.params)
        raise CheckpointError(f"parameter names do not match config: {sorted(missing)}")
    for name, t in model.store.items():
        arr = ckpt.params[name]
        if tuple(arr.shape) != t.data.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {tuple(arr.shape)} != "
                f"model shape {t.data.shape}"
            )
        t.data[...] = arr.astype(t.data.dtype, copy=False)
    for name, buf in model.store.buffers():
        if name not in ckpt.buffers:
            raise CheckpointError(f"buffer {name} missing from checkpoint")
        buf[...] = ckpt.buffers[name]
    if "dropout" in ckpt.rng:
        model.dropout_rng.bit_generator.state = ckpt.rng["dropout"]


def restore_optimizer(optimizer: AdamW, ckpt: CheckpointData) -> None:
    optimizer.load_state_dict(
        {"step": ckpt.opt_step, "m": ckpt.opt_m, "v": ckpt.opt_v})
