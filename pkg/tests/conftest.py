import pytest
import torch

from usp.codec import IdentityCodec, LatentCodecConfig, load_codec, train_codec
from usp.data import get_normalization, make_shapes
from usp.mae import PretrainModelConfig
from usp.utils import set_determinism

set_determinism()


@pytest.fixture(scope="session")
def vae_half():
    return get_normalization("vae_half")


@pytest.fixture(scope="session")
def small_train():
    return make_shapes(256, "train", seed=0)


@pytest.fixture(scope="session")
def small_val():
    return make_shapes(96, "val", seed=0)


@pytest.fixture(scope="session")
def identity_codec():
    return IdentityCodec()


@pytest.fixture(scope="session")
def trained_codec(small_train, small_val, vae_half):
    """A genuinely trained (if briefly) conv codec: 32x32 -> 4x8x8 latents."""
    cfg = LatentCodecConfig(channels=4, stride=4, width=16)
    arc = train_codec(
        small_train, small_val, cfg, vae_half, epochs=4, seed=0, recon_threshold=0.25
    )
    codec, spec = load_codec(arc)
    return codec, spec, arc


def micro_mae_config(**overrides) -> PretrainModelConfig:
    """Sub-1k-parameter masked autoencoder for finite-difference checks."""
    base = dict(
        latent_channels=2,
        grid=(4, 4),
        patch=2,
        depth=1,
        heads=1,
        dim=4,
        dec_depth=1,
        dec_dim=4,
        mlp_ratio=1.0,
    )
    base.update(overrides)
    return PretrainModelConfig(**base)


def param_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
