"""Portable named-tensor container shared by every model stage.

File layout ("USPK"):
    magic   4 bytes  b"USPK"
    version u16 LE
    hlen    u32 LE   header byte length
    header  UTF-8 JSON: stage tag, config digest, parent digest chain,
            free-form meta, and the tensor manifest
            [{name, shape, dtype "f32le", offset}] with contiguous,
            non-overlapping offsets into the payload
    payload concatenated little-endian float32 tensors

Write -> read -> write is byte-identical: the header is serialized with a
fixed field order and the payload order follows the manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DigestMismatch
from .utils import atomic_write_bytes

MAGIC = b"USPK"
VERSION = 1

STAGES = ("codec", "pretrain", "generator", "classifier", "embedder")


@dataclass
class CheckpointArchive:
    stage: str
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    config_digest: str = ""
    parents: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage tag {self.stage!r}; expected one of {STAGES}")

    def put(self, name: str, tensor: torch.Tensor) -> None:
        if name in self.tensors:
            raise ConfigError(f"duplicate tensor name {name!r}")
        self.tensors[name] = tensor.detach().to(torch.float32).contiguous().cpu()

    def get(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Selective load: tensors under a name prefix, prefix stripped."""
        out = {}
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                out[name[len(prefix):]] = t
        return out

    def digest(self) -> str:
        """Content fingerprint over stage, meta, and all tensor bytes."""
        h = hashlib.sha256()
        h.update(self.stage.encode())
        h.update(json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode())
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        manifest = []
        offset = 0
        payload = bytearray()
        for name, t in self.tensors.items():
            raw = t.numpy().astype("<f4", copy=False).tobytes()
            manifest.append(
                {"name": name, "shape": list(t.shape), "dtype": "f32le", "offset": offset}
            )
            payload.extend(raw)
            offset += len(raw)
        header = {
            "stage": self.stage,
            "config_digest": self.config_digest,
            "parents": self.parents,
            "meta": self.meta,
            "tensors": manifest,
        }
        hbytes = json.dumps(header, sort_keys=False, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<HI", VERSION, len(hbytes)) + hbytes + bytes(payload)

    def save(self, path) -> str:
        atomic_write_bytes(path, self.to_bytes())
        return self.digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CheckpointArchive":
        if data[:4] != MAGIC:
            raise DigestMismatch("not a USPK archive (bad magic)")
        version, hlen = struct.unpack("<HI", data[4:10])
        if version != VERSION:
            raise ConfigError(f"unsupported archive version {version}")
        header = json.loads(data[10 : 10 + hlen].decode())
        payload = data[10 + hlen :]
        arc = cls(
            stage=header["stage"],
            meta=header["meta"],
            config_digest=header["config_digest"],
            parents=header["parents"],
        )
        expected = 0
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            if entry["dtype"] != "f32le":
                raise ConfigError(f"unsupported dtype {entry['dtype']}")
            if entry["offset"] != expected:
                raise DigestMismatch("archive manifest offsets are not contiguous")
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            raw = payload[entry["offset"] : entry["offset"] + nbytes]
            if len(raw) != nbytes:
                raise DigestMismatch("archive payload truncated")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            arc.tensors[entry["name"]] = torch.from_numpy(arr)
            expected += nbytes
        if expected != len(payload):
            raise DigestMismatch("archive payload has trailing bytes")
        return arc

    @classmethod
    def load(cls, path) -> "CheckpointArchive":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def archive_from_module(
    stage: str,
    module: torch.nn.Module,
    meta: dict | None = None,
    config_digest: str = "",
    parents: list[str] | None = None,
) -> CheckpointArchive:
    arc = CheckpointArchive(
        stage=stage, meta=meta or {}, config_digest=config_digest, parents=parents or []
    )
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            arc.put(name, t)
    return arc


def load_module_state(module: torch.nn.Module, arc: CheckpointArchive, prefix: str = "") -> None:
    tensors = arc.subset(prefix) if prefix else dict(arc.tensors)
    state = module.state_dict()
    missing = [k for k, v in state.items() if v.is_floating_point() and k not in tensors]
    if missing:
        raise DigestMismatch(f"archive is missing tensors: {missing[:8]}")
    for name, t in tensors.items():
        if name not in state:
            raise DigestMismatch(f"archive tensor {name!r} has no destination")
        if tuple(state[name].shape) != tuple(t.shape):
            raise DigestMismatch(
                f"shape mismatch for {name!r}: {tuple(t.shape)} vs {tuple(state[name].shape)}"
            )
    module.load_state_dict({**state, **tensors})
