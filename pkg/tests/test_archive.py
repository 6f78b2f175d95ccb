import pytest
import torch

from usp.archive import CheckpointArchive, archive_from_module, load_module_state
from usp.errors import ConfigError, DigestMismatch


def _archive():
    arc = CheckpointArchive(stage="pretrain", meta={"k": 1}, config_digest="abc", parents=["p"])
    arc.put("enc.w", torch.arange(6, dtype=torch.float32).reshape(2, 3))
    arc.put("enc.b", torch.zeros(3))
    arc.put("dec.w", torch.ones(2, 2))
    return arc


def test_round_trip_byte_identical(tmp_path):
    arc = _archive()
    path = tmp_path / "a.uspk"
    arc.save(path)
    raw1 = path.read_bytes()
    reloaded = CheckpointArchive.load(path)
    reloaded.save(tmp_path / "b.uspk")
    raw2 = (tmp_path / "b.uspk").read_bytes()
    assert raw1 == raw2
    assert reloaded.digest() == arc.digest()
    assert torch.equal(reloaded.get("enc.w"), arc.get("enc.w"))
    assert reloaded.meta == {"k": 1} and reloaded.parents == ["p"]


def test_subset_strips_prefix():
    arc = _archive()
    sub = arc.subset("enc.")
    assert set(sub) == {"w", "b"}


def test_truncated_payload_detected(tmp_path):
    arc = _archive()
    path = tmp_path / "a.uspk"
    arc.save(path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(DigestMismatch):
        CheckpointArchive.load(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.uspk"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DigestMismatch):
        CheckpointArchive.load(path)


def test_digest_sensitive_to_values():
    a = _archive()
    b = _archive()
    b.tensors["enc.w"] = b.tensors["enc.w"] + 1.0
    assert a.digest() != b.digest()


def test_duplicate_and_unknown_stage():
    arc = _archive()
    with pytest.raises(ConfigError):
        arc.put("enc.w", torch.zeros(1))
    with pytest.raises(ConfigError):
        CheckpointArchive(stage="nonsense")


def test_module_round_trip():
    lin = torch.nn.Linear(3, 2)
    arc = archive_from_module("classifier", lin, meta={"x": 1})
    lin2 = torch.nn.Linear(3, 2)
    load_module_state(lin2, arc)
    assert torch.equal(lin.weight, lin2.weight)
    bad = torch.nn.Linear(4, 2)
    with pytest.raises(DigestMismatch):
        load_module_state(bad, arc)
