"""Latent cache file: precomputed frozen-codec encodings of a dataset.

File layout ("USPC"):
    magic   4 bytes  b"USPC"
    version u16 LE
    hlen    u32 LE
    header  UTF-8 JSON: codec_fingerprint (hex), count, shape [C, H, W],
            dtype "f32le", samples [[sample_id, label], ...]
    payload tightly packed little-endian float32 records in sample_id order

Horizontal-flip augmentation is baked in at build time by encoding both
orientations of each image (ids "<id>" and "<id>~flip"), which keeps the
cache a pure lookup during pretraining.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .codec import codec_fingerprint, encode
from .data import ImageBatch, NormalizationSpec
from .errors import ConfigError, DigestMismatch
from .utils import atomic_write_bytes

MAGIC = b"USPC"
VERSION = 1


@dataclass
class LatentCache:
    codec_fingerprint: str
    values: torch.Tensor  # [N, C, H, W] float32
    labels: torch.Tensor  # int64, -1 where unlabeled
    sample_ids: list[str]

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    def require_fingerprint(self, fingerprint: str) -> None:
        if fingerprint != self.codec_fingerprint:
            raise DigestMismatch(
                "latent cache was built with a different codec/normalization "
                f"({self.codec_fingerprint[:12]} vs {fingerprint[:12]})"
            )


def write_cache(
    path,
    fingerprint: str,
    values: torch.Tensor,
    labels: torch.Tensor | None,
    sample_ids: list[str],
) -> None:
    n = values.shape[0]
    if len(sample_ids) != n or (labels is not None and labels.shape[0] != n):
        raise ConfigError("sample_ids/labels length must match record count")
    order = sorted(range(n), key=lambda i: sample_ids[i])
    values = values[order] if n else values
    label_list = [int(labels[i]) for i in order] if labels is not None else [-1] * n
    header = {
        "codec_fingerprint": fingerprint,
        "count": n,
        "shape": list(values.shape[1:]),
        "dtype": "f32le",
        "samples": [[sample_ids[i], label_list[k]] for k, i in enumerate(order)],
    }
    hbytes = json.dumps(header, sort_keys=False, separators=(",", ":")).encode()
    payload = values.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    atomic_write_bytes(path, MAGIC + struct.pack("<HI", VERSION, len(hbytes)) + hbytes + payload)


def read_cache(path) -> LatentCache:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise DigestMismatch("not a USPC latent cache (bad magic)")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise ConfigError(f"unsupported cache version {version}")
    header = json.loads(data[10 : 10 + hlen].decode())
    shape = tuple(header["shape"])
    count = int(header["count"])
    if len(header["samples"]) != count:
        raise DigestMismatch("cache header count does not match its sample list")
    expected = count * int(np.prod(shape, dtype=np.int64)) * 4
    payload = data[10 + hlen :]
    if len(payload) != expected:
        raise DigestMismatch(
            f"cache payload truncated: {len(payload)} bytes, expected {expected}"
        )
    values = torch.from_numpy(
        np.frombuffer(payload, dtype="<f4").reshape((count, *shape)).copy()
    )
    labels = torch.tensor([s[1] for s in header["samples"]], dtype=torch.int64)
    return LatentCache(
        codec_fingerprint=header["codec_fingerprint"],
        values=values,
        labels=labels,
        sample_ids=[s[0] for s in header["samples"]],
    )


def build_cache(
    batch: ImageBatch,
    codec: torch.nn.Module,
    spec: NormalizationSpec,
    path,
    flip: bool = True,
    batch_size: int = 256,
) -> LatentCache:
    """Encode a dataset (optionally both flip orientations) and write the cache."""
    if not getattr(codec, "frozen", False):
        raise ConfigError("codec must be frozen before building a cache")
    n = len(batch)
    width = max(6, len(str(max(n - 1, 0))))
    parts, ids, labels = [], [], []
    grid = encode(batch, codec, spec, batch_size=batch_size)
    parts.append(grid.values)
    ids.extend(f"{i:0{width}d}" for i in range(n))
    if batch.labels is not None:
        labels.append(batch.labels)
    if flip and n:
        flipped = ImageBatch(
            pixels=batch.pixels.flip(-1), labels=batch.labels, source_id=batch.source_id
        )
        parts.append(encode(flipped, codec, spec, batch_size=batch_size).values)
        ids.extend(f"{i:0{width}d}~flip" for i in range(n))
        if batch.labels is not None:
            labels.append(batch.labels)
    values = torch.cat(parts) if n else parts[0]
    all_labels = torch.cat(labels) if labels else None
    write_cache(path, codec_fingerprint(codec, spec), values, all_labels, ids)
    return read_cache(path)
