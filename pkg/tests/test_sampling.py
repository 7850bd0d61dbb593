import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from deepflow.foundation import NonFiniteError, RngStream
from deepflow.network import DeepFlow, ModelConfig
from deepflow.sampling import (
    ModelVelocity,
    SamplerConfig,
    cfg_combine,
    predict_velocity,
    sample,
    sample_ode,
    sample_sde,
    score_from_velocity,
    step_sensitivity_sweep,
)

f64 = torch.float64


def _trained_like(seed=0, **kw):
    cfg = dict(k=2, depth_per_branch=1, hidden=16, heads=2, num_classes=3, freq_dim=8)
    cfg.update(kw)
    model = DeepFlow(ModelConfig(**cfg), RngStream(seed, 2))
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g))
    return model.eval()


def point_field(x0):
    """Exact velocity of the linear path when the data distribution is the single point x0."""
    return lambda x, t: (x - x0) / t


# ---------------------------------------------------------------- config


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(t_end=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(kind="heun")
    with pytest.raises(ValueError):
        SamplerConfig(cfg_scale=-1)
    g = SamplerConfig(steps=4, t_end=0.2).grid()
    np.testing.assert_allclose(g, [1.0, 0.8, 0.6, 0.4, 0.2])


# ---------------------------------------------------------------- guidance


def test_cfg_combine_examples():
    v_null, v_class = torch.tensor([0.0]), torch.tensor([2.0])
    assert float(cfg_combine(v_null, v_class, 1.5)) == 3.0
    assert torch.equal(cfg_combine(v_null, v_class, 1.0), v_class)
    assert torch.equal(cfg_combine(v_null, v_class, 0.0), v_null)


def test_predict_velocity_guidance_paths():
    model = _trained_like()
    x = torch.randn(4, 2)
    ids = torch.tensor([0, 1, 2, 0])
    v1, out = predict_velocity(model, x, 0.5, ids, 1.0)
    assert torch.equal(v1, model(x, 0.5, ids).v[-1])
    assert all(torch.all(g == 0) for g in out.gaps)
    v0, _ = predict_velocity(model, x, 0.5, ids, 0.0)
    v_null = model(x, 0.5, torch.full_like(ids, model.null_class)).v[-1]
    torch.testing.assert_close(v0, v_null)
    v13, _ = predict_velocity(model, x, 0.5, ids, 1.3)
    torch.testing.assert_close(v13, v_null + 1.3 * (v1 - v_null))
    assert not torch.allclose(v13, v1)


def test_predict_velocity_unconditional_rejects_classes():
    model = _trained_like(num_classes=0)
    with pytest.raises(ValueError):
        predict_velocity(model, torch.randn(2, 2), 0.5, torch.tensor([0, 1]))


# ---------------------------------------------------------------- score


@settings(max_examples=200)
@given(st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_score_matches_gaussian_oracle(t, seed):
    rng = np.random.default_rng(seed)
    x0 = torch.from_numpy(rng.normal(size=3))
    x = torch.from_numpy(rng.normal(size=(5, 3)) * 2)
    s = score_from_velocity(x, point_field(x0)(x, t), t)
    # score of N((1-t) x0, t^2 I)
    oracle = -(x - (1 - t) * x0) / t**2
    rel = ((s - oracle).abs() / oracle.abs().clamp_min(1e-300)).max().item()
    assert rel < 1e-6


def test_score_examples():
    x = torch.tensor([[0.3, -1.2]], dtype=f64)
    assert torch.equal(score_from_velocity(x, torch.randn(1, 2, dtype=f64), 1.0), -x)
    x0 = torch.tensor([1.0, 2.0], dtype=f64)
    t = 0.25
    mode = ((1 - t) * x0)[None]
    s = score_from_velocity(mode, point_field(x0)(mode, t), t)
    assert s.abs().max().item() < 1e-15
    with pytest.raises(ValueError):
        score_from_velocity(x, x, 0.0)


# ---------------------------------------------------------------- ODE


def test_ode_zero_field_returns_noise():
    cfg = SamplerConfig(kind="ode", steps=10)
    x_init = torch.randn(6, 2)
    out, _ = sample_ode(lambda x, t: torch.zeros_like(x), cfg, 6, x_init=x_init)
    assert torch.equal(out, x_init)


@pytest.mark.parametrize("steps", [1, 7, 50, 250])
def test_ode_exact_on_single_point_field(steps):
    x0 = torch.tensor([0.7, -1.3], dtype=f64)
    cfg = SamplerConfig(kind="ode", steps=steps)
    x_init = torch.randn(100, 2, dtype=f64)
    out, _ = sample_ode(point_field(x0), cfg, 100, x_init=x_init)
    expected = x0 + cfg.t_end * (x_init - x0)
    # affine solution reproduced by every Euler step; only f64 rounding remains
    assert (out - expected).abs().max().item() <= 64 * np.finfo(np.float64).eps


def test_ode_determinism_and_trajectory():
    model = _trained_like()
    cfg = SamplerConfig(kind="ode", steps=12, record_trajectory=True)
    ids = torch.tensor([0, 1, 2])
    a, ta = sample_ode(model, cfg, 3, ids, RngStream(7))
    b, tb = sample_ode(model, cfg, 3, ids, RngStream(7))
    assert torch.equal(a, b)
    assert len(ta.states) == 13 and np.all(np.diff(ta.times) < 0)
    assert ta.times[0] == 1.0 and ta.times[-1] == pytest.approx(cfg.t_end)


def test_sampler_aborts_on_non_finite():
    with pytest.raises(NonFiniteError, match="step 0"):
        sample_ode(lambda x, t: x * float("inf"), SamplerConfig(kind="ode", steps=3), 2, x_init=torch.ones(2, 2))


def test_sample_shapes_follow_geometry():
    model = _trained_like(geometry="image", image_size=4, patch=2, num_classes=0)
    x, _ = sample(model, SamplerConfig(kind="sde", steps=3), 5, None, RngStream(1))
    assert x.shape == (5, 1, 4, 4)
    x, _ = sample(_trained_like(), SamplerConfig(kind="ode", steps=3), 5, torch.zeros(5, dtype=torch.long),
                  RngStream(1))
    assert x.shape == (5, 2)


# ---------------------------------------------------------------- SDE


def test_sde_without_diffusion_is_bitwise_ode():
    model = _trained_like()
    ids = torch.tensor([0, 2, 1, 1])
    ode_cfg = SamplerConfig(kind="ode", steps=20, record_trajectory=True)
    sde_cfg = SamplerConfig(kind="sde", steps=20, diffusion="zero", record_trajectory=True)
    _, t_ode = sample_ode(model, ode_cfg, 4, ids, RngStream(3))
    x_sde, t_sde = sample_sde(model, sde_cfg, 4, ids, RngStream(3))
    assert len(t_sde.states) == len(t_ode.states) + 1
    for a, b in zip(t_ode.states, t_sde.states):
        assert torch.equal(a, b)
    # the extra state is one deterministic Euler step from t_end to 0
    last = t_ode.states[-1]
    v = ModelVelocity(model, ids)(last, ode_cfg.t_end)
    assert torch.equal(x_sde, last + v * (0.0 - ode_cfg.t_end))
    assert t_sde.times[-1] == 0.0


def test_sde_single_point_terminal_distribution():
    x0 = torch.tensor([1.5, -0.5])
    cfg = SamplerConfig(kind="sde", steps=250)
    x, _ = sample_sde(point_field(x0), cfg, 10_000, stream=RngStream(11), data_shape=(2,))
    assert (x.mean(0) - x0).abs().max().item() < 0.05
    assert x.var(0).max().item() < 0.01


def test_sde_stream_ids_differ_but_agree_statistically():
    x0 = torch.tensor([0.0, 0.0])
    # a Gaussian data distribution N(0, 0.25 I) has the closed-form velocity below
    sigma2 = 0.25

    def field(x, t):
        var = t**2 + (1 - t) ** 2 * sigma2
        return x * (t - (1 - t) * sigma2) / var

    cfg = SamplerConfig(kind="sde", steps=100)
    a, _ = sample_sde(field, cfg, 10_000, stream=RngStream(5, 1), data_shape=(2,))
    b, _ = sample_sde(field, cfg, 10_000, stream=RngStream(5, 2), data_shape=(2,))
    assert not torch.equal(a, b)
    for x in (a, b):
        assert x.mean(0).abs().max().item() < 0.03
        assert np.allclose(x.var(0).numpy(), sigma2, atol=0.03)
    assert (a.mean(0) - b.mean(0)).abs().max().item() < 0.04


def test_sde_requires_positive_t_end():
    with pytest.raises(ValueError):
        sample_sde(point_field(torch.zeros(2)), SamplerConfig(kind="sde", t_end=0.0), 2, stream=RngStream(0),
                   data_shape=(2,))


# ---------------------------------------------------------------- sweep


def test_step_sensitivity_sweep(tmp_path):
    model = _trained_like()
    ids = torch.zeros(16, dtype=torch.long)
    metric = lambda x: float(x.norm(dim=1).mean())
    rows, summary = step_sensitivity_sweep(model, (5,), metric, 16, RngStream(0), class_ids=ids)
    assert len(rows) == 1
    steps = (5, 10, 15, 20, 25)
    rows, summary = step_sensitivity_sweep(model, steps, metric, 16, RngStream(0), class_ids=ids,
                                           out_csv=tmp_path / "sweep.csv")
    assert [r[0] for r in rows] == list(steps)
    vals = np.array([r[1] for r in rows])
    assert summary["mean"] == pytest.approx(vals.mean()) and summary["std"] == pytest.approx(vals.std())
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "steps,metric" and len(lines) == 1 + 5 + 2
