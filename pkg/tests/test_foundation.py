import numpy as np
import pytest
import torch

from deepflow.foundation import (
    NonFiniteError,
    RngStream,
    check_finite,
    flatten_params,
    functional_loss,
    grad_check,
    rng_normal,
    rng_uniform,
)


def test_grad_check_quadratic():
    rep = grad_check(lambda x: (x**2).sum(), torch.tensor([1.0, 2.0], dtype=torch.float64), eps=1e-5)
    np.testing.assert_allclose(rep.analytic, [2.0, 4.0])
    assert rep.max_rel_error < 1e-6
    assert rep.passed


def test_grad_check_linear():
    x = torch.randn(7, dtype=torch.float64)
    rep = grad_check(lambda x: x.sum(), x, eps=1e-5)
    np.testing.assert_array_equal(rep.analytic, np.ones(7))
    assert rep.max_rel_error < 1e-9


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**3).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=torch.float64)

    rep = grad_check(Bad.apply, torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    assert not rep.passed
    assert rep.worst_coordinate == 2


def test_grad_check_passed_iff_below_tol():
    x = torch.tensor([0.3, -1.2], dtype=torch.float64)
    rep = grad_check(lambda x: torch.sin(x).sum(), x, eps=1e-3, tol=1e-12)
    assert rep.passed == (rep.max_rel_error <= 1e-12)
    assert not rep.passed


def test_grad_check_non_finite_raises():
    with pytest.raises(NonFiniteError):
        grad_check(lambda x: torch.log(x).sum(), torch.tensor([-1.0], dtype=torch.float64))


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), torch.ones(2, dtype=torch.float64), eps=0)


def test_rng_determinism():
    a = rng_normal(RngStream(3, 9), (5, 4))
    b = rng_normal(RngStream(3, 9), (5, 4))
    assert torch.equal(a, b)
    s1, s2 = RngStream(3, 9), RngStream(3, 9)
    for _ in range(3):
        assert np.array_equal(s1.uniform(10), s2.uniform(10))


def test_rng_counter_advances_and_streams_differ():
    s = RngStream(1, 0)
    a, b = s.normal(4), s.normal(4)
    assert s.counter == 2
    assert not np.array_equal(a, b)
    assert not np.array_equal(RngStream(1, 0).normal(4), RngStream(1, 1).normal(4))


def test_rng_normal_moments():
    x = rng_normal(RngStream(0, 0), 100_000, dtype=torch.float64)
    assert abs(float(x.mean())) < 0.02
    assert abs(float(x.var()) - 1.0) < 0.05


def test_rng_uniform_range():
    for dtype in (torch.float32, torch.float64):
        u = rng_uniform(RngStream(5, 2), 100_000, dtype=dtype)
        assert float(u.min()) >= 0.0 and float(u.max()) < 1.0


def test_rng_state_roundtrip_and_child():
    s = RngStream(11, 4)
    s.normal(3)
    r = RngStream.from_state(s.state())
    assert np.array_equal(s.normal(6), r.normal(6))
    c1, c2 = s.child("x"), s.child("x")
    assert c1 == c2 and c1.stream_id != s.stream_id
    assert s.child("x") != s.child("y")


def test_check_finite():
    check_finite(torch.ones(3))
    with pytest.raises(NonFiniteError):
        check_finite(torch.tensor([1.0, float("nan")]))


def test_grad_check_batched_paths_match_loop():
    lin = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Tanh(), torch.nn.Linear(4, 1)).double()
    x = torch.randn(5, 3, dtype=torch.float64)
    f = functional_loss(lin, lambda: lin(x).pow(2).mean())
    vec = flatten_params(lin)
    looped = grad_check(f, vec, eps=1e-5)
    per_tensor = grad_check(f, vec, eps=1e-5, chunk=7)
    flat = grad_check(lambda v: f(v), vec, eps=1e-5, chunk=7)
    np.testing.assert_allclose(per_tensor.numeric, looped.numeric, rtol=0, atol=1e-9)
    np.testing.assert_allclose(flat.numeric, looped.numeric, rtol=0, atol=1e-9)
    assert looped.passed and per_tensor.passed and flat.passed
