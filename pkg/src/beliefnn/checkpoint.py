"""Deterministic binary checkpoints.

Layout: magic, a length-prefixed JSON header (sorted keys, no whitespace
variance), then raw little-endian float64 buffers in the order the header
manifests them.  No timestamps or environment data anywhere, so identical
state serializes to identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .gaussians import GaussianArray

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "FORMAT_TAG"]

_MAGIC = b"BNNMSGPASS"
FORMAT_TAG = 1


class CheckpointError(RuntimeError):
    pass


def _collect_arrays(trainer):
    """Name -> flat float64 array for everything a checkpoint restores."""
    arrays: dict[str, np.ndarray] = {}
    for li, layer in enumerate(trainer.net.weighted_layers):
        for part, g in (("prior", layer.prior), ("marginal", layer.marginal), ("agg_other", layer.agg_other)):
            arrays[f"layer{li}/{part}/tau"] = g.tau
            arrays[f"layer{li}/{part}/rho"] = g.rho
        for bid in sorted(trainer.aggregates):
            g = trainer.aggregates[bid][li]
            arrays[f"layer{li}/aggregate{bid}/tau"] = g.tau
            arrays[f"layer{li}/aggregate{bid}/rho"] = g.rho
    return arrays


def save_checkpoint(path, trainer, model_text: str, config_text: str):
    arrays = _collect_arrays(trainer)
    manifest = []
    offset = 0
    for name in arrays:
        n = int(arrays[name].size)
        manifest.append({"name": name, "size": n, "offset": offset})
        offset += n * 8
    header = {
        "format": FORMAT_TAG,
        "model": model_text,
        "config": config_text,
        "batch_ids": sorted(int(b) for b in trainer.aggregates),
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in arrays:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (header dict, name -> float64 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode())
        if header.get("format") != FORMAT_TAG:
            raise CheckpointError(f"{path}: unsupported format tag {header.get('format')}")
        payload = fh.read()
    arrays = {}
    for item in header["manifest"]:
        start = item["offset"]
        end = start + item["size"] * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated at byte {len(payload)} (need {end})")
        arrays[item["name"]] = np.frombuffer(payload[start:end], dtype="<f8").copy()
    return header, arrays


def restore_network(net, arrays):
    """Install checkpoint arrays into a freshly built network's layers."""
    for li, layer in enumerate(net.weighted_layers):
        for part, g in (("prior", layer.prior), ("marginal", layer.marginal), ("agg_other", layer.agg_other)):
            tau = arrays.get(f"layer{li}/{part}/tau")
            rho = arrays.get(f"layer{li}/{part}/rho")
            if tau is None or rho is None or tau.size != layer.n_params:
                raise CheckpointError(f"checkpoint missing or mismatched arrays for layer {li} {part}")
            g.tau = tau.copy()
            g.rho = rho.copy()
