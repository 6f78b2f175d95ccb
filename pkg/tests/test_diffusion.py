import math

import pytest
import torch

from usp.cache import LatentCache
from usp.diffusion import (
    FlowPath,
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    ddpm_loss,
    ddpm_sample,
    flow_loss,
    flow_sample,
    respaced_timesteps,
    train_generator,
)
from usp.errors import ConfigError
from usp.generator import Generator, GeneratorConfig, build_generator
from usp.utils import new_generator


def tiny_gen_cfg(framework="dit", **kw):
    base = dict(framework=framework, latent_channels=4, grid=(8, 8), patch=2,
                depth=2, heads=2, dim=16, num_classes=10)
    base.update(kw)
    return GeneratorConfig(**base)


class OracleEps(Generator):
    """Returns the exact noise for a point-mass dataset at value c."""

    def __init__(self, cfg, schedule, c):
        super().__init__(cfg)
        self.schedule = schedule
        self.c = c

    def forward(self, x, t, y):
        abar = self.schedule.gather(self.schedule.alphas_cumprod, t.long(), x)
        return (x - torch.sqrt(abar) * self.c) / torch.sqrt(1.0 - abar)


class ConstantModel(Generator):
    def __init__(self, cfg, value=0.0):
        super().__init__(cfg)
        self.value = value

    def forward(self, x, t, y):
        return torch.full_like(x, self.value)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_schedule_monotone_and_range():
    sched = NoiseSchedule()
    abar = sched.alphas_cumprod
    assert bool((abar[1:] < abar[:-1]).all())
    assert 0.0 < float(abar[-1]) and float(abar[0]) <= 1.0
    assert abs(float(abar[0]) - (1.0 - float(sched.betas[0]))) < 1e-12


def test_q_sample_limits_and_value():
    sched = NoiseSchedule(timesteps=3)
    sched.alphas_cumprod = torch.tensor([1.0, 0.25, 1e-12], dtype=torch.float64)
    x0 = torch.full((2, 1, 2, 2), 2.0)
    eps = torch.zeros_like(x0)
    assert torch.allclose(sched.q_sample(x0, torch.tensor([0, 0]), eps), x0)
    out = sched.q_sample(x0, torch.tensor([1, 1]), eps)
    assert torch.allclose(out, torch.ones_like(out))  # sqrt(0.25) * 2
    noisy = sched.q_sample(x0, torch.tensor([2, 2]), torch.randn_like(x0))
    # at vanishing signal the draw is essentially the noise
    assert float((noisy - sched.q_sample(torch.zeros_like(x0), torch.tensor([2, 2]), noisy)).abs().max()) < 1e-5


def test_q_sample_time_bounds():
    sched = NoiseSchedule(timesteps=10)
    with pytest.raises(ConfigError):
        sched.q_sample(torch.zeros(1, 1, 1, 1), torch.tensor([10]), torch.zeros(1, 1, 1, 1))


def test_linear_path_identity_and_endpoints():
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(8, 2, 3, 3, generator=gen)
    eps = torch.randn(8, 2, 3, 3, generator=gen)
    for tval in (0.0, 0.3, 1.0):
        t = torch.full((8,), tval)
        xt = FlowPath.interpolate(x0, eps, t)
        direct = (1.0 - tval) * x0 + tval * eps
        assert torch.equal(xt, direct.to(xt.dtype)) or torch.allclose(xt, direct)
    assert torch.allclose(FlowPath.interpolate(x0, eps, torch.zeros(8)), x0)
    assert torch.allclose(FlowPath.interpolate(x0, eps, torch.ones(8)), eps)
    assert torch.allclose(FlowPath.velocity(x0, eps), eps - x0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_ddpm_loss_oracle_zero():
    sched = NoiseSchedule(timesteps=50)
    cfg = tiny_gen_cfg()
    x0 = torch.full((8, 4, 8, 8), 1.5)
    model = OracleEps(cfg, sched, 1.5)
    gen = new_generator(0)
    t = torch.randint(0, 50, (8,), generator=gen)
    noise = torch.randn(x0.shape, generator=gen)
    loss = ddpm_loss(model, x0, None, sched, gen, label_dropout=0.0, t=t, noise=noise)
    assert float(loss) < 1e-8


def test_ddpm_loss_zero_model_unit_noise():
    sched = NoiseSchedule()
    cfg = tiny_gen_cfg()
    model = ConstantModel(cfg, 0.0)
    gen = new_generator(1)
    x0 = torch.zeros(512, 4, 8, 8)
    loss = ddpm_loss(model, x0, None, sched, gen, label_dropout=0.0)
    assert abs(float(loss) - 1.0) < 0.05  # E||eps||^2 per element


def test_flow_loss_oracle_and_zero_model():
    cfg = tiny_gen_cfg("sit")

    class OracleV(Generator):
        def __init__(self, cfg):
            super().__init__(cfg)
            self.x0 = None
            self.noise = None

        def forward(self, x, t, y):
            return self.noise - self.x0

    model = OracleV(cfg)
    gen = new_generator(0)
    x0 = torch.randn(16, 4, 8, 8, generator=gen)
    noise = torch.randn(16, 4, 8, 8, generator=gen)
    model.x0, model.noise = x0, noise
    t = torch.rand(16, generator=gen)
    assert float(flow_loss(model, x0, None, gen, 0.0, t=t, noise=noise)) < 1e-12

    sigma = 1.5
    zero_model = ConstantModel(cfg, 0.0)
    big = sigma * torch.randn(512, 4, 8, 8, generator=gen)
    loss = flow_loss(zero_model, big, None, gen, 0.0)
    assert abs(float(loss) - (1.0 + sigma**2)) < 0.12  # E||eps - x0||^2 per element


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------


def test_cfg_combine_arithmetic():
    cond = torch.ones(2, 3)
    uncond = torch.zeros(2, 3)
    assert torch.equal(cfg_combine(cond, uncond, 1.0), cond)
    assert torch.equal(cfg_combine(cond, uncond, 0.0), uncond)
    assert torch.equal(cfg_combine(cond, uncond, 4.0), torch.full((2, 3), 4.0))


def test_cfg_affine_in_w():
    gen = torch.Generator().manual_seed(0)
    cond = torch.randn(4, 5, generator=gen)
    uncond = torch.randn(4, 5, generator=gen)
    w1, w2 = 1.3, 3.7
    mid = cfg_combine(cond, uncond, (w1 + w2) / 2)
    avg = (cfg_combine(cond, uncond, w1) + cfg_combine(cond, uncond, w2)) / 2
    assert torch.allclose(mid, avg, atol=1e-6)


def test_cfg_requires_label_dropout():
    cfg = tiny_gen_cfg()
    model = build_generator(cfg, seed=0)
    with pytest.raises(ConfigError):
        ddpm_sample(model, NoiseSchedule(10), SamplerConfig(steps=2, cfg_scale=2.0),
                    2, None, label_dropout_trained=0.0)
    with pytest.raises(ConfigError):
        flow_sample(model, SamplerConfig(steps=2, cfg_scale=2.0), 2, None,
                    label_dropout_trained=0.0)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def test_respaced_timesteps():
    assert respaced_timesteps(10, 10) == list(range(9, -1, -1))
    ts = respaced_timesteps(1000, 4)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 4
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_ddpm_single_step_point_mass_oracle():
    sched = NoiseSchedule()
    cfg = tiny_gen_cfg()
    c = 0.7
    model = OracleEps(cfg, sched, c)
    out = ddpm_sample(model, sched, SamplerConfig(steps=1, seed=3), 8, None,
                      label_dropout_trained=0.1)
    # float32 cancellation is amplified by 1/sqrt(abar) at the deep-noise step
    assert float((out - c).abs().max()) < 1e-2


def test_ddpm_many_step_point_mass_recovers():
    sched = NoiseSchedule()
    cfg = tiny_gen_cfg()
    model = OracleEps(cfg, sched, -0.4)
    out = ddpm_sample(model, sched, SamplerConfig(steps=25, seed=0), 4, None,
                      label_dropout_trained=0.1)
    assert float((out.mean(dim=0) + 0.4).abs().mean()) < 0.1


def test_ddpm_sampler_determinism_and_shape():
    sched = NoiseSchedule(100)
    model = build_generator(tiny_gen_cfg(), seed=0)
    a = ddpm_sample(model, sched, SamplerConfig(steps=5, seed=9), 3, None, 0.1)
    b = ddpm_sample(model, sched, SamplerConfig(steps=5, seed=9), 3, None, 0.1)
    assert torch.equal(a, b)
    assert a.shape == (3, 4, 8, 8)
    c = ddpm_sample(model, sched, SamplerConfig(steps=5, seed=10), 3, None, 0.1)
    assert not torch.equal(a, c)


def test_flow_single_step_zero_velocity_returns_noise():
    cfg = tiny_gen_cfg("sit")
    model = ConstantModel(cfg, 0.0)
    out = flow_sample(model, SamplerConfig(steps=1, seed=4), 5, None, 0.1)
    expected = torch.randn(5, 4, 8, 8, generator=new_generator(4))
    assert torch.equal(out, expected)


def test_flow_point_mass_one_step_exact():
    cfg = tiny_gen_cfg("sit")
    c = 1.1

    class PointMassV(Generator):
        def forward(self, x, t, y):
            tt = t.reshape(-1, 1, 1, 1)
            return (x - c) / tt

    model = PointMassV(cfg)
    out = flow_sample(model, SamplerConfig(steps=1, seed=0), 4, None, 0.1)
    assert float((out - c).abs().max()) < 1e-5


def _gaussian_transport_error(steps: int, sigma: float = 2.0) -> float:
    """Euler endpoint error against the exact linear-Gaussian transport map."""
    cfg = tiny_gen_cfg("sit")

    class AnalyticV(Generator):
        def forward(self, x, t, y):
            tt = t.reshape(-1, 1, 1, 1)
            denom = (1.0 - tt) ** 2 * sigma**2 + tt**2
            return x * (tt - (1.0 - tt) * sigma**2) / denom

    model = AnalyticV(cfg)
    out = flow_sample(model, SamplerConfig(steps=steps, seed=123), 64, None, 0.1)
    start = torch.randn(64, 4, 8, 8, generator=new_generator(123))
    exact = sigma * start
    return float((out - exact).abs().mean())


def test_flow_euler_first_order_convergence():
    e8 = _gaussian_transport_error(8)
    e16 = _gaussian_transport_error(16)
    e32 = _gaussian_transport_error(32)
    assert 0.4 <= e16 / e8 <= 0.6
    assert 0.4 <= e32 / e16 <= 0.6


# ---------------------------------------------------------------------------
# learned-variance option and training
# ---------------------------------------------------------------------------


def test_learned_sigma_loss_and_sampling():
    sched = NoiseSchedule(100)
    cfg = tiny_gen_cfg(learn_sigma=True)
    model = build_generator(cfg, seed=0)
    gen = new_generator(0)
    x0 = torch.randn(8, 4, 8, 8, generator=gen)
    loss = ddpm_loss(model, x0, torch.arange(8) % 10, sched, gen)
    assert math.isfinite(float(loss))
    out = ddpm_sample(model, sched, SamplerConfig(steps=4, seed=0), 2, None, 0.1)
    assert out.shape == (2, 4, 8, 8)


def test_train_generator_smoke(tmp_path):
    gen = torch.Generator().manual_seed(0)
    cache = LatentCache(
        codec_fingerprint="test",
        values=torch.randn(64, 4, 8, 8, generator=gen),
        labels=torch.arange(64, dtype=torch.int64) % 10,
        sample_ids=[f"{i:06d}" for i in range(64)],
    )
    model = build_generator(tiny_gen_cfg(), seed=0)
    arc, rows = train_generator(
        cache, model, steps=12, batch_size=16, seed=0,
        out_dir=tmp_path, checkpoint_every=6,
    )
    assert (tmp_path / "generator.uspk").exists()
    assert (tmp_path / "ckpt-000006.uspk").exists()
    assert (tmp_path / "ckpt-000012.uspk").exists()
    assert rows and math.isfinite(rows[-1]["loss"])
    assert arc.meta["trained_steps"] == 12


def test_train_generator_geometry_check():
    cache = LatentCache("x", torch.randn(8, 4, 4, 4), torch.zeros(8, dtype=torch.int64),
                        [str(i) for i in range(8)])
    model = build_generator(tiny_gen_cfg(), seed=0)
    from usp.errors import DigestMismatch

    with pytest.raises(DigestMismatch):
        train_generator(cache, model, steps=1)
