"""Network checkpoints.

A checkpoint is an uncompressed zip container with

* ``manifest.json``: schema version, network spec, seed, training step,
  optional extra metadata, and one entry per blob (path, dtype, shape);
* ``blobs/<path>``: raw little-endian parameter or buffer bytes.

Loading restores every value bit-exactly.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .networks import GroupedNetwork

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(path, net: GroupedNetwork, step: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    for kind, items in (("param", ((n, p.data) for n, p in net.named_parameters())), ("buffer", net.named_buffers())):
        for name, arr in items:
            arr = _le(arr)
            entries.append({"path": name, "kind": kind, "dtype": arr.dtype.name, "shape": list(arr.shape)})
            blobs.append((name, arr.tobytes()))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "network": net.spec_dict(),
        "seed": net.seed,
        "step": int(step),
        "dtype": np.dtype(net.dtype).name,
        "extra": extra or {},
        "blobs": entries,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, raw in blobs:
            zf.writestr(f"blobs/{name}", raw)
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (OSError, zipfile.BadZipFile, KeyError, ValueError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint manifest ({err})") from err


def load_checkpoint(path) -> tuple[GroupedNetwork, dict]:
    """Rebuild the network stored at ``path``; returns ``(net, manifest)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return _load(path)
    except (zipfile.BadZipFile, KeyError, ValueError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint ({type(err).__name__}: {err})") from err


def _load(path: Path) -> tuple[GroupedNetwork, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
        spec = manifest["network"]
        net = GroupedNetwork(
            spec["groups"], spec["classes"], seed=manifest["seed"], in_channels=spec["in_channels"],
            input_size=spec["input_size"], stem_channels=spec["stem_channels"], dtype=np.dtype(manifest["dtype"]).type,
        )
        params = dict(net.named_parameters())
        buffers = dict(net.named_buffers())
        for entry in manifest["blobs"]:
            name = entry["path"]
            raw = zf.read(f"blobs/{name}")
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<")).reshape(entry["shape"])
            target = params[name].data if entry["kind"] == "param" else buffers[name]
            if target.shape != arr.shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape} != network shape {target.shape}")
            target[...] = arr
    return net, manifest
