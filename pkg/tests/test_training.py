import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from deepflow.checkpoint import load_checkpoint
from deepflow.config import RunConfig
from deepflow.datasets import DatasetSpec, generate
from deepflow.foundation import NonFiniteError, RngStream, flatten_params, functional_loss, grad_check
from deepflow.interpolant import gt_velocity, interpolate
from deepflow.network import BranchOutputs, DeepFlow, ModelConfig
from deepflow.training import (
    TrainConfig,
    Trainer,
    acceleration_loss,
    deep_supervision_loss,
    metrics_header,
    objective,
    sample_batch,
    second_order_step,
    total_loss,
    train_loop,
)

f64 = torch.float64


def _tiny_model(**kw):
    base = dict(k=2, depth_per_branch=1, hidden=16, heads=2, num_classes=8, freq_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def _data(n=512, seed=0):
    return generate(DatasetSpec("eight_gaussians", n=n, seed=seed))


# ---------------------------------------------------------------- losses


def test_deep_supervision_examples():
    V = torch.tensor([[1.0, -2.0]], dtype=f64)
    deep, terms = deep_supervision_loss([V.clone(), V.clone()], V, [0.2, 1.0])
    assert float(deep) == 0.0 and all(float(t) == 0 for t in terms)

    zero = torch.zeros(1, 2, dtype=f64)
    v1 = torch.tensor([[2.0, 0.0]], dtype=f64)  # MSE 2
    v2 = torch.tensor([[2.0, math.sqrt(2.0)]], dtype=f64)  # MSE 3
    deep, terms = deep_supervision_loss([v1, v2], zero, [0.2, 1.0])
    assert [float(t) for t in terms] == pytest.approx([2.0, 3.0], abs=1e-15)
    assert float(deep) == pytest.approx(3.4, abs=1e-14)


def test_deep_supervision_k1_is_plain_flow_matching():
    v, V = torch.randn(8, 2, dtype=f64), torch.randn(8, 2, dtype=f64)
    deep, _ = deep_supervision_loss([v], V, [1.0])
    assert torch.equal(deep, torch.mean((v - V) ** 2))


def test_deep_supervision_errors():
    with pytest.raises(ValueError):
        deep_supervision_loss([torch.zeros(2, 2)], torch.zeros(2, 3), [1.0])
    with pytest.raises(ValueError):
        deep_supervision_loss([torch.zeros(2, 2)], torch.zeros(2, 2), [0.2, 1.0])


def test_second_order_step_examples():
    x0 = torch.tensor([1.0, 0.0], dtype=f64)
    x1 = torch.tensor([0.0, 1.0], dtype=f64)
    xt = interpolate(x0, x1, 0.3)
    torch.testing.assert_close(xt, torch.tensor([0.7, 0.3], dtype=f64), rtol=0, atol=1e-16)
    out = second_order_step(xt, gt_velocity(x0, x1), torch.zeros(2, dtype=f64), -0.3)
    torch.testing.assert_close(out, x0, rtol=0, atol=1e-15)
    one = torch.tensor([1.0], dtype=f64)
    assert float(second_order_step(one, 2 * one, 4 * one, 0.5)) == 2.5
    x = torch.randn(3, 2)
    assert torch.equal(second_order_step(x, torch.randn(3, 2), torch.randn(3, 2), 0.0), x)
    with pytest.raises(ValueError):
        second_order_step(x, torch.zeros(3, 3), torch.zeros(3, 2), 0.1)


def test_acceleration_loss_scalar_example():
    x0 = torch.zeros(1, 1, dtype=f64)
    x1 = torch.full((1, 1), 2.0, dtype=f64)
    out = BranchOutputs(tokens=None, v=[torch.full((1, 1), 2.0, dtype=f64), None],
                        a=[torch.full((1, 1), 4.0, dtype=f64)])
    total, terms = acceleration_loss(x0, x1, out, np.array([[0.5, 0.5]]))
    assert float(total) == 0.25 and len(terms) == 1


def test_acceleration_loss_counts_sites_and_requires_outputs():
    x0, x1 = torch.randn(4, 2, dtype=f64), torch.randn(4, 2, dtype=f64)
    V = gt_velocity(x0, x1)
    out = BranchOutputs(tokens=None, v=[V, V, V], a=[torch.zeros_like(V)] * 2)
    total, terms = acceleration_loss(x0, x1, out, np.random.default_rng(0).uniform(size=(4, 3)))
    assert len(terms) == 2
    assert float(total) < 1e-30
    with pytest.raises(ValueError):
        acceleration_loss(x0, x1, BranchOutputs(tokens=None, v=[V, V]), np.zeros((4, 2)))


@settings(max_examples=100)
@given(st.integers(0, 2**31), st.integers(2, 4))
def test_taylor_exactness_for_ground_truth(seed, k):
    g = torch.Generator().manual_seed(seed)
    x0, x1 = torch.randn(5, 3, generator=g, dtype=f64), torch.randn(5, 3, generator=g, dtype=f64)
    times = torch.rand(5, k, generator=g, dtype=f64)
    V = gt_velocity(x0, x1)
    out = BranchOutputs(tokens=None, v=[V] * k, a=[torch.zeros_like(V)] * (k - 1))
    total, _ = acceleration_loss(x0, x1, out, times)
    assert float(total) <= 1e-28


def test_total_loss_examples():
    assert total_loss(3.4, 0.5, 1.0) == pytest.approx(3.9)
    assert total_loss(3.4, 0.5, 0.0) == 3.4
    assert total_loss(3.4, 0.0, 1.0) == 3.4


def test_train_config_betas():
    assert TrainConfig().branch_weights(3) == [0.2, 0.2, 1.0]
    assert TrainConfig(betas=[0.5, 1.0]).branch_weights(2) == [0.5, 1.0]
    with pytest.raises(ValueError):
        TrainConfig(betas=[0.5, 0.7])
    with pytest.raises(ValueError):
        TrainConfig(betas=[0.5, 1.0]).branch_weights(3)


# ---------------------------------------------------------------- breakdown ledger


@settings(max_examples=10)
@given(st.integers(0, 1000), st.floats(0, 3), st.sampled_from([2, 3]))
def test_breakdown_ledger(seed, lam, k):
    model = DeepFlow(_tiny_model(k=k))
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g))
    x0, x1 = torch.randn(6, 2, generator=g), torch.randn(6, 2, generator=g)
    times = np.sort(np.random.default_rng(seed).uniform(size=(6, k)), axis=1)[:, ::-1].copy()
    betas = TrainConfig().branch_weights(k)
    total, bd = objective(model, x0, x1, times, None, betas, lam)
    deep = np.float32(sum(np.float32(b) * np.float32(s) for b, s in zip(betas, bd.per_branch_sup)))
    assert bd.deep_star == pytest.approx(float(deep), rel=4 * np.finfo(np.float32).eps)
    assert bd.total == pytest.approx(bd.deep_star + lam * bd.acc_total, rel=4 * np.finfo(np.float32).eps, abs=1e-7)
    assert len(bd.per_vera_acc) == k - 1


# ---------------------------------------------------------------- trainer


def test_step_zero_supervision_equals_velocity_energy():
    data, labels = _data()
    trainer = Trainer(DeepFlow(_tiny_model(k=3)), TrainConfig(batch_size=32), RngStream(5, 1))
    xb, yb = sample_batch(data, labels, 32, RngStream(9))
    x1, _, _ = trainer.draw_inputs(xb, yb, RngStream(2, 2))
    _, bd = trainer.loss(xb, yb, RngStream(2, 2))
    energy = torch.mean(gt_velocity(xb, x1) ** 2).item()
    assert bd.per_branch_sup == [energy] * 3
    expected = float(np.float32(0.2) * np.float32(energy) * 2 + np.float32(energy))
    assert bd.deep_star == pytest.approx(expected, rel=2 * np.finfo(np.float32).eps)


def test_train_step_determinism():
    data, labels = _data()
    runs = []
    for _ in range(2):
        tr = Trainer(DeepFlow(_tiny_model()), TrainConfig(batch_size=16, lr=1e-3), RngStream(3, 1))
        rows = []
        for _ in range(100):
            rows.append(tr.train_step(*sample_batch(data, labels, 16, tr.stream)).row(tr.step, 0))
        runs.append(rows)
    assert runs[0] == runs[1]


def test_non_finite_loss_aborts():
    tr = Trainer(DeepFlow(_tiny_model()), TrainConfig(batch_size=4), RngStream(0, 1))
    bad = torch.tensor([[float("inf"), 0.0]] * 4)
    with pytest.raises(NonFiniteError):
        tr.train_step(bad, torch.zeros(4, dtype=torch.long))


def test_ema_matches_closed_form():
    data, labels = _data()
    rho = 0.9
    tr = Trainer(DeepFlow(_tiny_model()), TrainConfig(batch_size=16, lr=1e-2, ema_decay=rho), RngStream(1, 1))
    theta0 = [p.detach().double().clone() for p in tr.model.parameters()]
    trace = []
    n = 3
    for _ in range(n):
        tr.train_step(*sample_batch(data, labels, 16, tr.stream))
        trace.append([p.detach().double().clone() for p in tr.model.parameters()])
    for idx, pe in enumerate(tr.ema.parameters()):
        expect = rho**n * theta0[idx] + (1 - rho) * sum(rho ** (n - 1 - j) * trace[j][idx] for j in range(n))
        torch.testing.assert_close(pe.double(), expect, rtol=1e-5, atol=1e-6)


def test_training_descent_three_seeds():
    # 2000 steps on 8 Gaussians, k=2, D=64: mean of the last 100 totals below half the step-0 loss
    for seed in range(3):
        data, labels = generate(DatasetSpec("eight_gaussians", n=20_000, seed=seed))
        cfg = ModelConfig(k=2, depth_per_branch=1, hidden=64, heads=4, freq_dim=64)
        tr = Trainer(DeepFlow(cfg), TrainConfig(batch_size=64, lr=1e-3, steps=2000), RngStream(seed, 1))
        xb, yb = sample_batch(data, labels, 64, tr.stream.child("init-batch"))
        start = tr.init_breakdown(xb, yb).total
        tail = []
        for step in range(2000):
            bd = tr.train_step(*sample_batch(data, labels, 64, tr.stream))
            if step >= 1900:
                tail.append(bd.total)
        assert np.mean(tail) < 0.5 * start, (seed, start, np.mean(tail))


@pytest.mark.parametrize("k,variant", [(2, "concat"), (2, "additive"), (3, "concat"), (3, "additive")])
def test_objective_gradient_against_extrapolated_differences(k, variant):
    # Richardson-combined central differences cancel the eps^2 truncation term, so a step
    # large enough to clear the loss's rounding still resolves gradients near 1e-8
    model = DeepFlow(_tiny_model(k=k, num_classes=3, vera_variant=variant), RngStream(0, 2)).double()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=f64))
    x0, x1 = torch.randn(4, 2, generator=g, dtype=f64), torch.randn(4, 2, generator=g, dtype=f64)
    times, ids = torch.rand(4, k, generator=g, dtype=f64), torch.tensor([0, 1, 2, 0])

    def loss():
        out = model(interpolate(x0, x1, times[:, 0]), times, ids)
        deep, _ = deep_supervision_loss(out.v, gt_velocity(x0, x1), TrainConfig().branch_weights(k))
        return total_loss(deep, acceleration_loss(x0, x1, out, times)[0], 1.0)

    f, x = functional_loss(model, loss), flatten_params(model)
    coarse = grad_check(f, x, eps=2e-3, chunk=512)
    fine = grad_check(f, x, eps=1e-3, chunk=512)
    numeric = (4 * fine.numeric - coarse.numeric) / 3
    a = fine.analytic
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    assert rel.max() < 1e-4


# ---------------------------------------------------------------- loop and resume


def _run(tmp_steps=20, **train_kw):
    train = dict(batch_size=16, steps=tmp_steps, lr=1e-3, log_interval=7)
    train.update(train_kw)
    return RunConfig(model=_tiny_model(), train=TrainConfig(**train),
                     data=DatasetSpec("eight_gaussians", n=256), seed=4)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_train_loop_csv_and_checkpoints(tmp_path):
    run = _run(20)
    data, labels = generate(run.data)
    train_loop(run, data, labels, tmp_path)
    rows = _rows(tmp_path / "metrics.csv")
    assert rows[0] == metrics_header(2, 1)
    assert rows[0] == ["step", "per_branch_sup_1", "per_branch_sup_2", "per_vera_acc_1",
                       "deep_star", "acc_total", "total", "lr"]
    assert len(rows) - 1 == 20 // 7 + 1
    assert [r[0] for r in rows[1:]] == ["0", "7", "14"]
    assert b"\r\n" not in (tmp_path / "metrics.csv").read_bytes()
    assert (tmp_path / "ckpt_final").exists() and (tmp_path / "ckpt_0000000.dfckpt").exists()


def test_train_loop_zero_steps_writes_init_checkpoint_only(tmp_path):
    run = _run(0)
    data, labels = generate(run.data)
    tr = train_loop(run, data, labels, tmp_path)
    assert tr.step == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_final", "metrics.csv"]
    assert len(_rows(tmp_path / "metrics.csv")) == 2


def test_train_loop_bad_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    run = _run(1)
    data, labels = generate(run.data)
    with pytest.raises(OSError, match="file"):
        train_loop(run, data, labels, blocker / "sub")


def test_resume_equivalence(tmp_path):
    run = _run(100, log_interval=10, save_interval=50)
    data, labels = generate(run.data)
    full = train_loop(run, data, labels, tmp_path / "full")

    split = tmp_path / "split"
    train_loop(_run(100, log_interval=10, save_interval=50, steps=50), data, labels, split)
    _, trainer = load_checkpoint(split / "ckpt_0000050.dfckpt")
    resumed = train_loop(run, data, labels, split, trainer=trainer)

    assert _rows(split / "metrics.csv") == _rows(tmp_path / "full" / "metrics.csv")
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(full.ema.parameters(), resumed.ema.parameters()):
        assert torch.equal(a, b)
