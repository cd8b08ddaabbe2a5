"""Checkpoint container.

Layout::

    ADVREX-CKPT\\n
    <manifest: one line of JSON>\\n
    <payload: raw little-endian float64 arrays, in manifest order>

The manifest records ``format_version``, ``layer_sizes``, ``epoch``,
``rex_active``, ``config_hash``, the RNG stream position, the array names and
shapes (parameters W0, b0, W1, b1, ... then matching ``v_*`` momentum
buffers), the payload length and its SHA-256, and the resolved config text.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .diffnet import NetworkParams

MAGIC = b"ADVREX-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: NetworkParams
    velocity: list[np.ndarray]
    epoch: int
    config_hash: str = ""
    rex_active: bool = False
    rng_state: dict = field(default_factory=dict)
    config_text: str = ""
    format_version: int = FORMAT_VERSION

    @property
    def layer_sizes(self) -> list[int]:
        return self.params.layer_sizes


def _names(n_layers: int) -> list[str]:
    out = []
    for i in range(n_layers):
        out += [f"W{i}", f"b{i}"]
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = ckpt.params.arrays()
    names = _names(len(ckpt.params.weights))
    if ckpt.velocity:
        if [v.shape for v in ckpt.velocity] != [a.shape for a in arrays]:
            raise CheckpointError("velocity shapes do not mirror the parameters")
        arrays = arrays + list(ckpt.velocity)
        names = names + ["v_" + n for n in names]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "layer_sizes": ckpt.params.layer_sizes,
        "epoch": ckpt.epoch,
        "rex_active": ckpt.rex_active,
        "config_hash": ckpt.config_hash,
        "rng": ckpt.rng_state,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "config": ckpt.config_text,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)
    tmp.replace(path)


def load_checkpoint(path, layer_sizes: Optional[list[int]] = None) -> Checkpoint:
    """Read a checkpoint; ``layer_sizes`` (if given) must match the stored network."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an advrex checkpoint")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('format_version')} "
                              f"is not supported (expected {FORMAT_VERSION})")
    payload = raw[end + 1:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays, offset = [], 0
    for spec in manifest["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(spec["shape"])
        arrays.append(a.astype(np.float64))
        offset += 8 * count
    n_param = 2 * (len(manifest["layer_sizes"]) - 1)
    try:
        params = NetworkParams.from_arrays(arrays[:n_param])
    except ValueError as e:
        raise CheckpointError(f"{path}: inconsistent arrays ({e})") from e
    if params.layer_sizes != manifest["layer_sizes"]:
        raise CheckpointError(f"{path}: array shapes disagree with layer_sizes {manifest['layer_sizes']}")
    if layer_sizes is not None and list(layer_sizes) != params.layer_sizes:
        raise CheckpointError(f"{path}: checkpoint has layer_sizes {params.layer_sizes}, "
                              f"expected {list(layer_sizes)}")
    return Checkpoint(params, arrays[n_param:], manifest["epoch"], manifest["config_hash"],
                      manifest["rex_active"], manifest["rng"], manifest.get("config", ""),
                      manifest["format_version"])
