"""Tensor contract, counter-based RNG streams and the finite-difference gradient checker.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
only adds the pieces the rest of the package needs around it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


class NonFiniteError(FloatingPointError):
    """Raised when a tensor or loss that must be finite is not."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise NonFiniteError(f"{what} has {bad} non-finite element(s) (shape {tuple(x.shape)})")
    return x


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """Counter-based random stream.

    Every draw builds a Philox generator keyed by ``(seed, stream_id)`` whose
    counter's high word is the draw index, so draws never overlap and the
    whole state is three integers.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        ctr = np.array([0, 0, 0, self.counter & _MASK64], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def normal(self, shape: Sequence[int] | int) -> np.ndarray:
        return self._generator().standard_normal(shape, dtype=np.float64)

    def uniform(self, shape: Sequence[int] | int) -> np.ndarray:
        return self._generator().random(shape, dtype=np.float64)

    def integers(self, high: int, shape: Sequence[int] | int) -> np.ndarray:
        return self._generator().integers(0, high, size=shape)

    def child(self, tag: int | str) -> "RngStream":
        """Independent sub-stream; the parent is not advanced."""
        if isinstance(tag, str):
            tag = int.from_bytes(tag.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(tag)
        sid = _splitmix64(_splitmix64(self.stream_id) ^ (tag & _MASK64))
        return RngStream(self.seed, sid, 0)

    def state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(int(state["seed"]), int(state["stream_id"]), int(state["counter"]))


def rng_normal(stream: RngStream, shape, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(stream.normal(shape)).to(dtype)


def rng_uniform(stream: RngStream, shape, dtype=torch.float32) -> torch.Tensor:
    out = torch.from_numpy(stream.uniform(shape)).to(dtype)
    # rounding to f32 can map values just below 1 onto 1.0
    if dtype != torch.float64:
        out = torch.clamp(out, max=1.0 - torch.finfo(dtype).eps / 2)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: int
    passed: bool
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-8,
    chunk: int = 0,
) -> GradCheckReport:
    """Compare the autograd gradient of scalar ``f`` at ``x`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``chunk > 0`` the perturbed points are evaluated ``chunk`` at a time
    through ``torch.func.vmap``; ``f`` must then be vmap-compatible.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = x.detach().to(torch.float64).clone()
    xr = x.clone().requires_grad_(True)
    y = f(xr)
    if y.numel() != 1:
        raise ValueError("f must return a scalar")
    if not math.isfinite(float(y.detach())):
        raise NonFiniteError(f"f(x) evaluated to {float(y.detach())}")
    (analytic,) = torch.autograd.grad(y, xr, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1).numpy()

    if chunk > 0:
        numeric = _batched_differences(f, x.reshape(-1), eps, chunk)
    else:
        numeric = _looped_differences(f, x, eps)
    if not np.all(np.isfinite(numeric)):
        raise NonFiniteError("finite-difference evaluation produced non-finite values")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(max_rel, worst, max_rel <= tol, analytic, numeric)


def _looped_differences(f, x: torch.Tensor, eps: float) -> np.ndarray:
    flat = x.reshape(-1)
    numeric = np.empty(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + eps
            fp = float(f(x))
            flat[i] = old - eps
            fm = float(f(x))
            flat[i] = old
            numeric[i] = (fp - fm) / (2 * eps)
    return numeric


def _batched_differences(f, flat: torch.Tensor, eps: float, chunk: int) -> np.ndarray:
    numeric = np.empty(flat.numel())
    if isinstance(f, functional_loss):
        base = f.unflatten(flat)
        for offset, size, name in f.segments():
            shape = base[name].shape

            def g(seg, name=name, shape=shape):
                return f.call({**base, name: seg.reshape(shape)})

            numeric[offset:offset + size] = _differences(g, base[name].reshape(-1), eps, chunk)
        return numeric
    return _differences(f, flat, eps, chunk)


def _differences(f, flat: torch.Tensor, eps: float, chunk: int) -> np.ndarray:
    n = flat.numel()
    fv = torch.func.vmap(f)
    numeric = np.empty(n)
    with torch.no_grad():
        for lo in range(0, n, chunk):
            idx = torch.arange(lo, min(lo + chunk, n))
            step = torch.zeros(len(idx), n, dtype=flat.dtype)
            step[torch.arange(len(idx)), idx] = eps
            fp = fv(flat + step).reshape(-1).numpy()
            fm = fv(flat - step).reshape(-1).numpy()
            numeric[lo:lo + len(idx)] = (fp - fm) / (2 * eps)
    return numeric


def flatten_params(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


class functional_loss:
    """Wrap ``loss_fn`` (which closes over ``module``) as a function of a flat parameter vector.

    Calling the object writes the vector into the module's parameters with a
    differentiable view, so it can be fed to :func:`grad_check`. The batched
    finite-difference path also uses :meth:`segments` to perturb one
    parameter tensor at a time, which keeps vmap from batching every weight.
    """

    def __init__(self, module: torch.nn.Module, loss_fn: Callable[[], torch.Tensor]):
        self.module = module
        self.loss_fn = loss_fn
        self.names = [n for n, _ in module.named_parameters()]
        self.shapes = [p.shape for _, p in module.named_parameters()]
        self.sizes = [p.numel() for _, p in module.named_parameters()]

    def unflatten(self, vec: torch.Tensor) -> dict:
        chunks = torch.split(vec, self.sizes)
        return {n: c.reshape(s) for n, c, s in zip(self.names, chunks, self.shapes)}

    def __call__(self, vec: torch.Tensor) -> torch.Tensor:
        return self.call(self.unflatten(vec))

    def segments(self):
        """(offset, size, name) of each parameter tensor inside the flat vector."""
        offset = 0
        for n, size in zip(self.names, self.sizes):
            yield offset, size, n
            offset += size

    def call(self, params: dict) -> torch.Tensor:
        # swap parameters in for the duration of loss_fn
        saved = {}
        for n, p in params.items():
            mod, attr = _resolve(self.module, n)
            saved[n] = mod._parameters[attr]
            mod._parameters[attr] = p
        try:
            return self.loss_fn()
        finally:
            for n, p in saved.items():
                mod, attr = _resolve(self.module, n)
                mod._parameters[attr] = p


def _resolve(module: torch.nn.Module, name: str):
    parts = name.split(".")
    for p in parts[:-1]:
        module = getattr(module, p)
    return module, parts[-1]
