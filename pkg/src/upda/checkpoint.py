"""Named-tensor checkpoint container.

File layout (little endian)::

    b"UPDACKPT"  u32 version  u64 index_len  <index_len bytes of JSON>  <payload>

The JSON index lists, per parameter group, every tensor's name, shape and
byte offset into the payload. Payloads are row-major float64. Output bytes
depend only on the tensors and metadata, so equal states give equal files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"UPDACKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    groups: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_modules(cls, modules: dict[str, nn.Module], meta: dict | None = None) -> "Checkpoint":
        groups = {
            gname: {k: v.detach().cpu().numpy().astype(np.float64, copy=True) for k, v in m.state_dict().items()}
            for gname, m in modules.items()
        }
        return cls(groups, dict(meta or {}))

    def load_into(self, group: str, module: nn.Module) -> nn.Module:
        if group not in self.groups:
            raise CheckpointError(f"checkpoint has no parameter group {group!r}")
        state = self.groups[group]
        expected = module.state_dict()
        if set(state) != set(expected):
            raise CheckpointError(f"group {group!r}: tensor names differ from the module")
        for name, value in expected.items():
            if tuple(value.shape) != state[name].shape:
                raise CheckpointError(f"group {group!r}: {name} has shape {state[name].shape}, "
                                      f"module expects {tuple(value.shape)}")
        module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
        return module

    def subset(self, names) -> "Checkpoint":
        return Checkpoint({g: self.groups[g] for g in names}, dict(self.meta))

    def equals(self, other: "Checkpoint") -> bool:
        if self.meta != other.meta or list(self.groups) != list(other.groups):
            return False
        return all(
            list(self.groups[g]) == list(other.groups[g])
            and all(np.array_equal(self.groups[g][k], other.groups[g][k]) for k in self.groups[g])
            for g in self.groups
        )

    def to_bytes(self) -> bytes:
        index, chunks, offset = [], [], 0
        for gname, tensors in self.groups.items():
            for name, arr in tensors.items():
                data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                index.append({"group": gname, "name": name, "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(data)})
                chunks.append(data)
                offset += len(data)
        head = json.dumps({"tensors": index, "meta": self.meta}, sort_keys=True).encode()
        return _HEAD.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _HEAD.size:
            raise CheckpointError("truncated checkpoint header")
        magic, version, n = _HEAD.unpack_from(blob)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _HEAD.size + n
        try:
            index = json.loads(blob[_HEAD.size:start])
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint index: {exc}") from None
        payload = blob[start:]
        groups: dict[str, dict[str, np.ndarray]] = {}
        for t in index["tensors"]:
            end = t["offset"] + t["nbytes"]
            if end > len(payload):
                raise CheckpointError(f"payload truncated inside {t['group']}/{t['name']}")
            arr = np.frombuffer(payload[t["offset"]:end], dtype="<f8").astype(np.float64)
            groups.setdefault(t["group"], {})[t["name"]] = arr.reshape(t["shape"])
        return cls(groups, index["meta"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
