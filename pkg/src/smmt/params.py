"""Named registry of learnable tensors plus the on-disk checkpoint format.

A checkpoint is a single file: one UTF-8 JSON manifest line
``{"format_version": 1, "entries": [{name, shape, dtype, byte_offset, byte_len}, ...]}``
terminated by ``\\n``, followed by a raw little-endian float32 payload.
Byte offsets are relative to the payload start.
"""

from __future__ import annotations

import json

import numpy as np

from .numerics import Tensor

CHECKPOINT_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Raised on invalid or inconsistent configuration values."""


class ParamStore:
    """Ordered name -> Tensor map; each tensor is stored exactly once.

    Weight sharing is expressed by different modules holding references to
    the same Tensor object under one registry name.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with every tensor cast (for float64 grad checks)."""
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=True))
        return out

    def state_bytes(self) -> bytes:
        entries = []
        chunks = []
        offset = 0
        for name, t in self._params.items():
            raw = np.ascontiguousarray(t.data.astype("<f4")).tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(t.shape),
                    "dtype": "f32",
                    "byte_offset": offset,
                    "byte_len": len(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
        manifest = json.dumps({"format_version": CHECKPOINT_FORMAT_VERSION, "entries": entries})
        return manifest.encode("utf-8") + b"\n" + b"".join(chunks)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.state_bytes())

    def load(self, path) -> None:
        """Fill existing tensors in-place from a checkpoint file."""
        with open(path, "rb") as f:
            blob = f.read()
        nl = blob.index(b"\n")
        manifest = json.loads(blob[:nl].decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
        payload = blob[nl + 1 :]
        names_seen = set()
        for e in manifest["entries"]:
            name = e["name"]
            if name not in self._params:
                raise KeyError(f"checkpoint entry {name!r} has no matching parameter")
            t = self._params[name]
            arr = np.frombuffer(payload, dtype="<f4", count=e["byte_len"] // 4, offset=e["byte_offset"])
            arr = arr.reshape(e["shape"]).astype(t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"checkpoint shape {arr.shape} != parameter shape {t.data.shape} for {name!r}")
            t.data = arr.copy()
            names_seen.add(name)
        missing = set(self._params) - names_seen
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")
