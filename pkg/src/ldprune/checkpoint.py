"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"LDPR" | u32 version | u32 description length | description (UTF-8 JSON)
    | float32 parameter payload, live parameters in graph order

The description carries the U-Net spec, the committed modification plans,
parameter names/shapes and the lineage hashes. Loading rebuilds the
skeleton from the stored U-Net spec, re-applies the plans, then fills the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import modify
from .graph import OperatorGraph, UNetSpec, build_unet

MAGIC = b"LDPR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _description(graph: OperatorGraph) -> dict:
    params = graph.live_parameters()
    return {
        "spec": graph.spec.to_dict(),
        "plans": [p.to_dict() for p in graph.applied_plans],
        "active_plan": graph.active_plan.to_dict() if graph.active_plan is not None else None,
        "params": [[name, list(p.shape)] for name, p in params],
        "param_count": int(sum(p.size for _, p in params)),
    }


def _payload(graph: OperatorGraph) -> bytes:
    return b"".join(p.data.astype("<f4", copy=False).tobytes() for p in graph.parameters())


def encode(graph: OperatorGraph, config_hash: str = "", parent_hash: str = "", extra: dict | None = None) -> bytes:
    desc = _description(graph)
    desc["config_hash"] = config_hash
    desc["parent_hash"] = parent_hash
    if extra:
        desc["extra"] = extra
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + _payload(graph)


def graph_hash(graph: OperatorGraph) -> str:
    """Content hash of architecture, active/committed edits and weights."""
    return hashlib.sha256(encode(graph)).hexdigest()


def save_checkpoint(graph: OperatorGraph, path, config_hash: str = "", parent_hash: str = "",
                    extra: dict | None = None) -> str:
    """Write ``graph`` to ``path``; returns the file's sha256."""
    if graph.active_plan is not None:
        raise CheckpointError("refusing to save a graph with a temporary modification active")
    data = encode(graph, config_hash, parent_hash, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def decode(data: bytes) -> tuple[OperatorGraph, dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not an LDPR checkpoint (bad magic)")
    version, n = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    desc = json.loads(data[12:12 + n].decode("utf-8"))
    payload = data[12 + n:]
    if len(payload) != 4 * desc["param_count"]:
        raise CheckpointError(f"payload holds {len(payload) // 4} floats, header declares {desc['param_count']}")

    graph = build_unet(UNetSpec.from_dict(desc["spec"]), seed=0)
    for p in desc["plans"]:
        modify.commit(graph, modify.ModificationPlan.from_dict(p))
    live = graph.live_parameters()
    if [[name, list(t.shape)] for name, t in live] != desc["params"]:
        raise CheckpointError("parameter layout in checkpoint does not match the rebuilt graph")
    flat = np.frombuffer(payload, dtype="<f4")
    offset = 0
    for _, t in live:
        t.data = flat[offset:offset + t.size].reshape(t.shape).astype(np.float32)
        offset += t.size
    return graph, desc


def load_checkpoint(path) -> tuple[OperatorGraph, dict]:
    return decode(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
