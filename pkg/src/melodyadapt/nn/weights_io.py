"""Versioned binary weight files.

Layout: 8-byte magic, u32 format version, u32 manifest length, UTF-8 JSON
manifest, then the tensors in manifest order as row-major little-endian
float32. The manifest records every layer (name, kind, hyperparams) and
every tensor (name, shape, trainable flag) plus a free-form "extra"
section used by the model module for its architecture description.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .network import Network, ParameterSet

MAGIC = b"MELADPT\x01"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """Malformed, truncated, or mismatched weight file."""


def _net_entry(net: Network, params: ParameterSet) -> list[dict]:
    entry = []
    for layer, name in zip(net.layers, net.names):
        tensors = params.tensors.get(name, {})
        entry.append(
            {
                "name": name,
                "kind": layer.kind,
                "hyperparams": layer.hyperparams(),
                "trainable": bool(params.trainable.get(name, False)),
                "tensors": [
                    {"name": key, "shape": list(tensors[key].shape)} for key in sorted(tensors)
                ],
            }
        )
    return entry


def save_weights(path, nets: dict[str, tuple[Network, ParameterSet]], extra: dict | None = None) -> None:
    """Write named networks and their parameters to one file."""
    manifest = {
        "networks": {name: _net_entry(net, params) for name, (net, params) in nets.items()},
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        # tensor blobs follow in sorted-network order, matching the
        # sort_keys manifest serialization the loader will iterate
        for name in sorted(manifest["networks"]):
            _, params = nets[name]
            for layer in manifest["networks"][name]:
                for tensor in layer["tensors"]:
                    arr = params.tensors[layer["name"]][tensor["name"]]
                    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_header(fh, path) -> dict:
    head = fh.read(len(MAGIC))
    if head != MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a weight file")
    version = struct.unpack("<I", _must_read(fh, 4, path))[0]
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    size = struct.unpack("<I", _must_read(fh, 4, path))[0]
    blob = _must_read(fh, size, path)
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: corrupt manifest: {exc}") from exc


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_weights(path, expected: dict[str, Network] | None = None) -> tuple[dict[str, ParameterSet], dict]:
    """Read parameters back; returns ({network: ParameterSet}, extra).

    When ``expected`` maps network names to Network objects, the stored
    manifest must match their layer names, kinds, and hyperparameters.
    """
    loaded: dict[str, ParameterSet] = {}
    with open(path, "rb") as fh:
        manifest = _read_header(fh, path)
        for net_name in sorted(manifest["networks"]):
            layers = manifest["networks"][net_name]
            params = ParameterSet()
            for layer in layers:
                tensors = {}
                for tensor in layer["tensors"]:
                    shape = tuple(tensor["shape"])
                    count = int(np.prod(shape)) if shape else 1
                    raw = _must_read(fh, count * 4, path)
                    tensors[tensor["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                params.tensors[layer["name"]] = tensors
                params.trainable[layer["name"]] = bool(layer["trainable"])
            loaded[net_name] = params
        if fh.read(1):
            raise WeightFormatError(f"{path}: trailing bytes after tensors")
    if expected is not None:
        _validate(manifest, expected, path)
    return loaded, manifest.get("extra", {})


def _validate(manifest: dict, expected: dict[str, Network], path) -> None:
    for net_name, net in expected.items():
        if net_name not in manifest["networks"]:
            raise WeightFormatError(f"{path}: missing network {net_name!r}")
        stored = manifest["networks"][net_name]
        wanted = [
            {"name": name, "kind": layer.kind, "hyperparams": layer.hyperparams()}
            for layer, name in zip(net.layers, net.names)
        ]
        got = [{"name": l["name"], "kind": l["kind"], "hyperparams": l["hyperparams"]} for l in stored]
        if wanted != got:
            raise WeightFormatError(
                f"{path}: architecture mismatch for {net_name!r}: expected {wanted}, found {got}"
            )


def _must_read(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise WeightFormatError(f"{path}: truncated file")
    return data
