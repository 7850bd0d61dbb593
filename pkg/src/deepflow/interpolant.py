"""Linear interpolant between data (t=0) and noise (t=1), time sampling and branch times."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .foundation import RngStream


class TimeSamplingScheme(str, Enum):
    UNIFORM = "uniform"
    LOGNORMAL = "lognormal"


_TINY = np.nextafter(0.0, 1.0)
_BELOW_ONE = np.nextafter(1.0, 0.0)


def logit_normal(n: np.ndarray | float) -> np.ndarray:
    """sigmoid(n), kept strictly inside (0, 1)."""
    t = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(n, dtype=np.float64)))
    return np.clip(t, _TINY, _BELOW_ONE)


def sample_time(scheme: TimeSamplingScheme | str, stream: RngStream, n: int | None = None):
    """Draw one time (``n is None``) or a vector of ``n`` times in [0, 1]."""
    scheme = TimeSamplingScheme(scheme)
    shape = 1 if n is None else n
    if scheme is TimeSamplingScheme.UNIFORM:
        t = stream.uniform(shape)
    else:
        t = logit_normal(stream.normal(shape))
    return float(t[0]) if n is None else t


@dataclass
class BranchTimes:
    """Per-sample branch times, shape (B, k), non-increasing along the branch axis."""

    times: np.ndarray
    alpha: float

    @property
    def k(self) -> int:
        return self.times.shape[1]

    def gaps(self) -> np.ndarray:
        """Signed gaps d_{t_i -> t_{i+1}}, shape (B, k-1)."""
        return self.times[:, 1:] - self.times[:, :-1]

    def validate(self) -> None:
        if np.any(self.times < 0) or np.any(self.times > 1):
            raise ValueError("branch times must lie in [0, 1]")
        d = self.gaps()
        if np.any(d > 0):
            raise ValueError("branch times must be non-increasing")
        if np.any(-d > self.alpha + 1e-12):
            raise ValueError("branch gap exceeds alpha")

    @classmethod
    def single(cls, t: np.ndarray | float, k: int, batch: int | None = None) -> "BranchTimes":
        """All branches share one time (inference)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if batch is not None and t.size == 1:
            t = np.full(batch, t[0])
        return cls(np.repeat(t[:, None], k, axis=1), 0.0)


def branch_times_from_gaps(t1, u, alpha: float) -> BranchTimes:
    """t_{i+1} = clamp(t_i - u_i, 0, 1); ``u`` has shape (B, k-1)."""
    t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
    u = np.asarray(u, dtype=np.float64).reshape(t1.shape[0], -1)
    times = np.empty((t1.shape[0], u.shape[1] + 1))
    times[:, 0] = t1
    for i in range(u.shape[1]):
        times[:, i + 1] = np.clip(times[:, i] - u[:, i], 0.0, 1.0)
    return BranchTimes(times, alpha)


def assign_branch_times(t1, k: int, alpha: float, stream: RngStream) -> BranchTimes:
    if k < 1:
        raise ValueError("k must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
    if np.any(t1 < 0) or np.any(t1 > 1):
        raise ValueError("t1 must lie in [0, 1]")
    if k == 1:
        return BranchTimes(t1[:, None].copy(), alpha)
    u = alpha * stream.uniform((t1.shape[0], k - 1))
    return branch_times_from_gaps(t1, u, alpha)


def _per_sample(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    if t.dim() == 0:
        return t
    return t.reshape(-1, *([1] * (like.dim() - 1)))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """x_t = t * x1 + (1 - t) * x0 with scalar or per-sample ``t``."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = _per_sample(t, x0)
    return t * x1 + (1 - t) * x0


def gt_velocity(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - x0


def time_gap(a, b):
    """Signed gap d_{a -> b} = b - a (elementwise on arrays)."""
    if np.isscalar(a) and np.isscalar(b):
        return float(b) - float(a)
    return np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
