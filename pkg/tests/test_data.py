import numpy as np
import pytest
import torch

from usp.data import (
    ImageBatch,
    NormalizationSpec,
    get_normalization,
    load_cifar_binary,
    load_dataset,
    make_shapes,
    normalize_image,
    denormalize_image,
)
from usp.errors import ConfigError


def test_normalize_vae_half_centering(vae_half):
    pixels = torch.full((1, 3, 4, 4), 0.5)
    out = normalize_image(pixels, vae_half)
    assert torch.equal(out, torch.zeros_like(out))


def test_normalize_vae_half_endpoints(vae_half):
    ones = normalize_image(torch.ones(1, 3, 2, 2), vae_half)
    zeros = normalize_image(torch.zeros(1, 3, 2, 2), vae_half)
    assert torch.equal(ones, torch.ones_like(ones))
    assert torch.equal(zeros, -torch.ones_like(zeros))


def test_normalize_imagenet_red_channel():
    spec = get_normalization("imagenet")
    pixels = torch.full((1, 3, 2, 2), 0.5)
    out = normalize_image(pixels, spec)
    expected = (0.5 - 0.485) / 0.229
    assert abs(float(out[0, 0, 0, 0]) - expected) < 1e-6
    assert abs(expected - 0.0655) < 1e-3


def test_normalize_shape_mismatch(vae_half):
    with pytest.raises(ConfigError):
        normalize_image(torch.zeros(1, 4, 2, 2), vae_half)


def test_normalization_std_positive():
    with pytest.raises(ConfigError):
        NormalizationSpec("bad", (0.5, 0.5, 0.5), (0.5, 0.0, 0.5))


def test_norm_switch_changes_stats_not_shapes():
    batch = make_shapes(4, "train", seed=1)
    a = normalize_image(batch, get_normalization("vae_half"))
    b = normalize_image(batch, get_normalization("imagenet"))
    assert a.shape == b.shape == batch.pixels.shape
    assert not torch.allclose(a, b)


def test_denormalize_inverts_within_tolerance(vae_half):
    batch = make_shapes(4, "train", seed=2)
    x = normalize_image(batch, vae_half)
    back = denormalize_image(x, vae_half)
    assert torch.allclose(back, batch.pixels, atol=1e-6)


def test_shapes_deterministic_and_prefix():
    a = make_shapes(16, "train", seed=3)
    b = make_shapes(16, "train", seed=3)
    longer = make_shapes(24, "train", seed=3)
    assert torch.equal(a.pixels, b.pixels)
    assert torch.equal(a.labels, b.labels)
    assert torch.equal(longer.pixels[:16], a.pixels)


def test_shapes_ranges_and_splits():
    train = make_shapes(64, "train", seed=0)
    val = make_shapes(64, "val", seed=0)
    assert train.pixels.min() >= 0.0 and train.pixels.max() <= 1.0
    assert train.labels.min() >= 0 and train.labels.max() <= 9
    assert not torch.equal(train.pixels, val.pixels)


def test_cifar_binary_reader(tmp_path):
    rng = np.random.default_rng(0)
    records = []
    labels = []
    for i in range(5):
        label = i % 3
        img = rng.integers(0, 256, size=3 * 32 * 32, dtype=np.uint8)
        records.append(np.concatenate([[label], img]).astype(np.uint8))
        labels.append(label)
    (tmp_path / "data_batch_1.bin").write_bytes(np.concatenate(records).tobytes())
    batch = load_cifar_binary(tmp_path, "train")
    assert batch.pixels.shape == (5, 3, 32, 32)
    assert batch.labels.tolist() == labels
    assert batch.pixels.max() <= 1.0
    with pytest.raises(ConfigError):
        load_cifar_binary(tmp_path, "test")


def test_cifar_binary_rejects_ragged_file(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(b"\x00" * 100)
    with pytest.raises(ConfigError):
        load_cifar_binary(tmp_path, "train")


def test_image_folder_reader(tmp_path):
    from PIL import Image

    for cls in ("a", "b"):
        d = tmp_path / cls
        d.mkdir()
        for i in range(2):
            arr = np.full((8, 8, 3), 40 * i, dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i}.png")
    batch = load_dataset({"name": "folder", "root": str(tmp_path), "image_size": 8}, "train")
    assert batch.pixels.shape == (4, 3, 8, 8)
    assert batch.labels.tolist() == [0, 0, 1, 1]


def test_load_dataset_unknown_keys():
    with pytest.raises(ConfigError):
        load_dataset({"name": "shapes10", "bogus": 1}, "train")


def test_image_batch_num_classes():
    batch = ImageBatch(torch.zeros(2, 3, 4, 4), torch.tensor([0, 4]), "x")
    assert batch.num_classes == 5
