"""Checkpoint files: ``<stem>.json`` (topology, normalisation, counters) and
``<stem>.bin`` (params, Adam m, Adam v as little-endian float32)."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .network import NetworkSpec, Normalization
from .optim import TrainState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, spec: NetworkSpec, state: TrainState, norm: Normalization) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.concatenate([state.params, state.adam_m, state.adam_v]).astype("<f4").tobytes()
    header = {
        "version": FORMAT_VERSION,
        "network": spec.to_json(),
        "normalization": norm.to_json(),
        "n_params": int(state.params.size),
        "step_count": state.step_count,
        "epoch": state.epoch,
        "rng_seed": state.rng_seed,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    bin_path = path.with_suffix(".bin")
    for p, blob in ((bin_path, payload), (path.with_suffix(".json"), (json.dumps(header, sort_keys=True, indent=1) + "\n").encode())):
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, p)
    return path.with_suffix(".json")


def load_checkpoint(path) -> tuple[NetworkSpec, TrainState, Normalization]:
    path = Path(path)
    hdr_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    header = json.loads(hdr_path.read_text())
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{hdr_path}: unsupported checkpoint version {header.get('version')}")
    payload = bin_path.read_bytes()
    n = int(header["n_params"])
    if len(payload) != 3 * 4 * n:
        raise CheckpointError(f"{bin_path}: payload is {len(payload)} bytes, expected {12 * n}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{bin_path}: payload checksum mismatch")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    spec = NetworkSpec.from_json(header["network"])
    if spec.n_params() != n:
        raise CheckpointError(f"{hdr_path}: topology needs {spec.n_params()} parameters, header says {n}")
    state = TrainState(arr[:n].copy(), arr[n:2 * n].copy(), arr[2 * n:].copy(),
                       int(header["step_count"]), int(header["epoch"]), int(header["rng_seed"]))
    return spec, state, Normalization.from_json(header["normalization"])
