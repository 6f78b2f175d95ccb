"""Seeding, digests, and determinism helpers used by every stage."""

from __future__ import annotations

import hashlib
import json
import os
from typing import Iterable

import numpy as np
import torch

_DETERMINISM_SET = False


def set_determinism() -> None:
    """Enable deterministic kernels process-wide (idempotent)."""
    global _DETERMINISM_SET
    if not _DETERMINISM_SET:
        torch.use_deterministic_algorithms(True)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        _DETERMINISM_SET = True


def derive_seed(master_seed: int, *labels: object) -> int:
    """Counter-free seed fan-out: hash the master seed with a label path.

    Every stage draws its RNG seed as derive_seed(master, stage_name, ...),
    so stages are independently reproducible without sharing RNG state.
    """
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def new_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def json_digest(obj: object) -> str:
    """Digest of a JSON-serializable object, stable across key order."""
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


def tensor_digest(tensors: Iterable[tuple[str, torch.Tensor]]) -> str:
    """Order-sensitive digest over named float tensors."""
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    """Digest over a module's parameters and buffers, in state-dict order."""
    return tensor_digest(
        (name, t) for name, t in module.state_dict().items() if t.is_floating_point()
    )


def check_finite(value: float | torch.Tensor, what: str) -> None:
    from .errors import NumericFailure

    v = float(value) if not isinstance(value, torch.Tensor) else value
    ok = np.isfinite(v) if not isinstance(v, torch.Tensor) else bool(torch.isfinite(v).all())
    if not ok:
        raise NumericFailure(f"non-finite value in {what}")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file + rename so partial writes never look valid."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def write_csv(path: str | os.PathLike, columns, rows: list[dict]) -> None:
    """Deterministic CSV: floats via repr (shortest round-trip), atomic write."""
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row[col]
            cells.append(repr(v) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_csv(path: str | os.PathLike) -> list[dict]:
    import csv

    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def trunc_normal_(tensor: torch.Tensor, std: float = 0.02, generator: torch.Generator | None = None) -> torch.Tensor:
    """Truncated normal init in [-2*std, 2*std], resample-free (clamped erfinv)."""
    with torch.no_grad():
        u = torch.rand(tensor.shape, generator=generator, dtype=torch.float64)
        # map uniform into the central mass of a normal, then clamp tails
        lo = torch.erf(torch.tensor(-2.0 / np.sqrt(2.0), dtype=torch.float64))
        hi = torch.erf(torch.tensor(2.0 / np.sqrt(2.0), dtype=torch.float64))
        u = lo + u * (hi - lo)
        vals = torch.erfinv(u) * np.sqrt(2.0) * std
        tensor.copy_(vals.clamp_(-2.0 * std, 2.0 * std).to(tensor.dtype))
    return tensor
