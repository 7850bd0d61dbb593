"""Euler ODE / Euler-Maruyama SDE samplers over a learned velocity field, integrated from t=1 (noise) toward t=0 (data)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .foundation import NonFiniteError, RngStream, rng_normal
from .interpolant import BranchTimes
from .network import BranchOutputs, DeepFlow

DIFFUSIONS = ("t", "zero")


@dataclass
class SamplerConfig:
    kind: str = "sde"  # "ode" | "sde"
    steps: int = 250
    t_start: float = 1.0
    t_end: float = 0.004
    diffusion: str = "t"  # w(t): "t" -> w(t) = t, "zero" -> w = 0
    cfg_scale: float = 1.0
    record_trajectory: bool = False

    def __post_init__(self):
        if self.kind not in ("ode", "sde"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0 <= self.t_end < self.t_start <= 1):
            raise ValueError("need 0 <= t_end < t_start <= 1")
        if self.diffusion not in DIFFUSIONS:
            raise ValueError(f"unknown diffusion {self.diffusion!r}; choose from {DIFFUSIONS}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")

    def grid(self) -> np.ndarray:
        return self.t_start + (self.t_end - self.t_start) * np.arange(self.steps + 1) / self.steps

    def w(self, t: float) -> float:
        return t if self.diffusion == "t" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    times: list = field(default_factory=list)


# ---------------------------------------------------------------- velocity


def cfg_combine(v_null: torch.Tensor, v_class: torch.Tensor, scale: float) -> torch.Tensor:
    return v_null + scale * (v_class - v_null)


@torch.no_grad()
def predict_velocity(model: DeepFlow, x: torch.Tensor, t: float, class_ids=None, cfg_scale: float = 1.0):
    """Velocity at a single time shared by every branch (all internal gaps are 0).

    Returns ``(v, outputs)`` where ``outputs`` is the class-conditional
    (or unconditional) forward pass.
    """
    if class_ids is not None and model.y_embedder is None:
        raise ValueError("class conditioning requested on an unconditional model")
    B = x.shape[0]
    times = BranchTimes.single(t, model.cfg.k, batch=B)
    out = model(x, times, class_ids)
    v = out.v[-1]
    if cfg_scale != 1.0 and class_ids is not None:
        null = torch.full_like(class_ids, model.null_class)
        v_null = model(x, times, null).v[-1]
        v = cfg_combine(v_null, v, cfg_scale)
    return v, out


class ModelVelocity:
    """Adapts a model to the ``f(x, t) -> v`` callable the samplers integrate; keeps the last forward pass."""

    def __init__(self, model: DeepFlow, class_ids=None, cfg_scale: float = 1.0):
        self.model = model
        self.class_ids = class_ids
        self.cfg_scale = cfg_scale
        self.last: Optional[BranchOutputs] = None

    def __call__(self, x: torch.Tensor, t: float) -> torch.Tensor:
        v, self.last = predict_velocity(self.model, x, t, self.class_ids, self.cfg_scale)
        return v


def score_from_velocity(x: torch.Tensor, v: torch.Tensor, t: float) -> torch.Tensor:
    """Marginal score implied by the linear path with a standard-normal prior: -(x + (1-t) v) / t."""
    if t <= 0:
        raise ValueError(f"score is undefined at t={t}")
    return -(x + (1 - t) * v) / t


# ---------------------------------------------------------------- samplers


def _velocity_fn(model, class_ids, cfg: SamplerConfig):
    if isinstance(model, DeepFlow):
        return ModelVelocity(model, class_ids, cfg.cfg_scale), model.cfg.data_shape
    return model, None


def _initial_noise(stream: RngStream, n: int, shape, dtype) -> torch.Tensor:
    return rng_normal(stream, (n, *shape), dtype=dtype)


def _check(x: torch.Tensor, i: int):
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"sampler state became non-finite at step {i}")


def sample_ode(
    model,
    cfg: SamplerConfig,
    n: int,
    class_ids=None,
    stream: Optional[RngStream] = None,
    x_init: Optional[torch.Tensor] = None,
    data_shape: Optional[Sequence[int]] = None,
    callback: Optional[Callable] = None,
    dtype=torch.float32,
):
    """Euler integration of dx = v dt on a uniform grid from t_start to t_end; returns (x(t_end), Trajectory|None).

    ``model`` is a :class:`DeepFlow` or a plain callable ``f(x, t)``.
    ``callback(i, t, x, v)`` fires after every velocity evaluation.
    """
    f, shape = _velocity_fn(model, class_ids, cfg)
    x = x_init if x_init is not None else _initial_noise(stream, n, shape or data_shape, dtype)
    ts = cfg.grid()
    traj = Trajectory([x.clone()], [float(ts[0])]) if cfg.record_trajectory else None
    for i in range(cfg.steps):
        t, dt = float(ts[i]), float(ts[i + 1] - ts[i])
        v = f(x, t)
        if callback is not None:
            callback(i, t, x, v)
        x = x + v * dt
        _check(x, i)
        if traj is not None:
            traj.states.append(x.clone())
            traj.times.append(float(ts[i + 1]))
    return x, traj


def sample_sde(
    model,
    cfg: SamplerConfig,
    n: int,
    class_ids=None,
    stream: Optional[RngStream] = None,
    x_init: Optional[torch.Tensor] = None,
    data_shape: Optional[Sequence[int]] = None,
    callback: Optional[Callable] = None,
    dtype=torch.float32,
):
    """Euler-Maruyama on dx = [v - w s / 2] dt + sqrt(w) dW (dt < 0), then one deterministic Euler step t_end -> 0.

    The trajectory holds the ``steps + 1`` grid states followed by the
    state at t=0 when ``t_end > 0``.
    """
    if cfg.t_end <= 0:
        raise ValueError("the SDE sampler needs t_end > 0")
    f, shape = _velocity_fn(model, class_ids, cfg)
    x = x_init if x_init is not None else _initial_noise(stream, n, shape or data_shape, dtype)
    noise_stream = stream.child("sde-noise") if stream is not None else None
    ts = cfg.grid()
    traj = Trajectory([x.clone()], [float(ts[0])]) if cfg.record_trajectory else None
    for i in range(cfg.steps):
        t, dt = float(ts[i]), float(ts[i + 1] - ts[i])
        v = f(x, t)
        if callback is not None:
            callback(i, t, x, v)
        w = cfg.w(t)
        if w == 0.0:
            x = x + v * dt
        else:
            s = score_from_velocity(x, v, t)
            z = rng_normal(noise_stream, tuple(x.shape), dtype=x.dtype)
            x = x + (v - 0.5 * w * s) * dt + math.sqrt(w * abs(dt)) * z
        _check(x, i)
        if traj is not None:
            traj.states.append(x.clone())
            traj.times.append(float(ts[i + 1]))
    t_last = float(ts[-1])
    x = x + f(x, t_last) * (0.0 - t_last)
    _check(x, cfg.steps)
    if traj is not None:
        traj.states.append(x.clone())
        traj.times.append(0.0)
    return x, traj


def sample(model, cfg: SamplerConfig, n: int, class_ids=None, stream=None, **kw):
    fn = sample_ode if cfg.kind == "ode" else sample_sde
    return fn(model, cfg, n, class_ids, stream, **kw)


def step_sensitivity_sweep(
    model,
    steps_list: Sequence[int],
    metric: Callable[[torch.Tensor], float],
    n: int,
    stream: RngStream,
    base: Optional[SamplerConfig] = None,
    class_ids=None,
    out_csv: Optional[Path] = None,
):
    """Sample at each step count with identical initial noise; returns (rows, summary).

    ``rows`` is a list of ``(steps, metric)``; ``summary`` holds mean and
    std-dev of the metric over the sweep.
    """
    base = base or SamplerConfig()
    rows = []
    for steps in steps_list:
        cfg = SamplerConfig(**{**base.to_dict(), "steps": int(steps), "kind": "sde", "record_trajectory": False})
        x, _ = sample_sde(model, cfg, n, class_ids, RngStream(stream.seed, stream.stream_id, stream.counter))
        rows.append((int(steps), float(metric(x))))
    vals = np.array([r[1] for r in rows])
    summary = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["steps", "metric"])
            w.writerows(rows)
            w.writerow(["mean", summary["mean"]])
            w.writerow(["std", summary["std"]])
    return rows, summary
