"""Deep-supervision + acceleration objective, optimiser step with EMA, and the training loop."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .foundation import NonFiniteError, RngStream, rng_normal
from .interpolant import (
    BranchTimes,
    TimeSamplingScheme,
    assign_branch_times,
    gt_velocity,
    interpolate,
    sample_time,
)
from .network import INIT_STREAM_ID, BranchOutputs, DeepFlow, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 256
    steps: int = 1000
    ema_decay: float = 0.9999
    alpha: float = 0.01
    lam: float = 1.0
    betas: Optional[list] = None  # per-branch; None -> 0.2 for intermediate, 1.0 for final
    time_scheme: str = "uniform"
    log_interval: int = 100
    save_interval: int = 0  # 0: only the initial and final checkpoints

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        TimeSamplingScheme(self.time_scheme)
        if self.betas is not None:
            self.betas = [float(b) for b in self.betas]
            if self.betas[-1] != 1.0:
                raise ValueError("the final branch weight must be 1.0")
        if self.log_interval < 1:
            raise ValueError("log_interval must be >= 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def branch_weights(self, k: int) -> list[float]:
        if self.betas is None:
            return [0.2] * (k - 1) + [1.0]
        if len(self.betas) != k:
            raise ValueError(f"betas has {len(self.betas)} entries, model has k={k}")
        return list(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class LossBreakdown:
    per_branch_sup: list
    per_vera_acc: list
    deep_star: float
    acc_total: float
    total: float
    lam: float
    betas: list

    def row(self, step: int, lr: float) -> list:
        return [step, *self.per_branch_sup, *self.per_vera_acc, self.deep_star, self.acc_total, self.total, lr]


def metrics_header(k: int, n_acc: int) -> list[str]:
    return (
        ["step"]
        + [f"per_branch_sup_{i + 1}" for i in range(k)]
        + [f"per_vera_acc_{i + 1}" for i in range(n_acc)]
        + ["deep_star", "acc_total", "total", "lr"]
    )


# ---------------------------------------------------------------- losses


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean((a - b) ** 2)


def deep_supervision_loss(v_preds: Sequence[torch.Tensor], V: torch.Tensor, betas: Sequence[float]):
    """Returns (deep_star, per-branch MSE terms)."""
    if len(v_preds) != len(betas):
        raise ValueError(f"{len(v_preds)} predictions but {len(betas)} weights")
    terms = [_mse(v, V) for v in v_preds]
    deep = sum(b * term for b, term in zip(betas, terms))
    return deep, terms


def second_order_step(x_t: torch.Tensor, v: torch.Tensor, a: torch.Tensor, d) -> torch.Tensor:
    """x_t + v*d + a*d^2/2 with scalar or per-sample gap ``d``."""
    if not (x_t.shape == v.shape == a.shape):
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)}, {tuple(v.shape)}, {tuple(a.shape)}")
    d = torch.as_tensor(d, dtype=x_t.dtype)
    if d.dim() > 0:
        d = d.reshape(-1, *([1] * (x_t.dim() - 1)))
    return x_t + v * d + 0.5 * a * d**2


def acceleration_loss(x0: torch.Tensor, x1: torch.Tensor, outputs: BranchOutputs, times):
    """Second-order extrapolation to t=0 at every VeRA site; returns (sum, per-site terms)."""
    if hasattr(times, "times"):
        times = times.times
    times = torch.as_tensor(times, dtype=x0.dtype)
    if times.dim() == 1:
        times = times[None].expand(x0.shape[0], -1)
    n_sites = times.shape[1] - 1
    if len(outputs.a) != n_sites:
        raise ValueError(f"expected {n_sites} acceleration outputs, got {len(outputs.a)}")
    terms = []
    for i in range(n_sites):
        t_i = times[:, i]
        x_ti = interpolate(x0, x1, t_i)
        pred = second_order_step(x_ti, outputs.v[i], outputs.a[i], -t_i)
        terms.append(_mse(pred, x0))
    total = sum(terms) if terms else torch.zeros((), dtype=x0.dtype)
    return total, terms


def total_loss(deep_star, acc_total, lam: float):
    return deep_star + lam * acc_total


def objective(model: DeepFlow, x0, x1, times, class_ids, betas, lam):
    """Full objective for fixed inputs; returns (total tensor, LossBreakdown)."""
    V = gt_velocity(x0, x1)
    t1 = torch.as_tensor(times.times[:, 0] if hasattr(times, "times") else times[:, 0], dtype=x0.dtype)
    x_t = interpolate(x0, x1, t1)
    out = model(x_t, times, class_ids)
    deep, sup_terms = deep_supervision_loss(out.v, V, betas)
    if model.cfg.has_acc:
        acc, acc_terms = acceleration_loss(x0, x1, out, times)
    else:
        acc, acc_terms = torch.zeros((), dtype=x0.dtype), []
    total = total_loss(deep, acc, lam)
    f = lambda v: float(v.detach())
    bd = LossBreakdown(
        per_branch_sup=[f(t) for t in sup_terms],
        per_vera_acc=[f(t) for t in acc_terms],
        deep_star=f(deep),
        acc_total=f(acc),
        total=f(total),
        lam=lam,
        betas=list(betas),
    )
    return total, bd


# ---------------------------------------------------------------- trainer


def drop_labels(class_ids: Optional[torch.Tensor], prob: float, null: int, stream: RngStream):
    if class_ids is None:
        return None
    u = stream.uniform(class_ids.shape[0])
    if prob <= 0:
        return class_ids
    return torch.where(torch.from_numpy(u < prob), torch.full_like(class_ids, null), class_ids)


class Trainer:
    """Owns the model, its EMA shadow, the optimiser and the training RNG stream."""

    def __init__(self, model: DeepFlow, cfg: TrainConfig, stream: RngStream):
        self.model = model
        self.cfg = cfg
        self.stream = stream
        self.step = 0
        self.last_breakdown: Optional[LossBreakdown] = None
        self.betas = cfg.branch_weights(model.cfg.k)
        self.ema = copy.deepcopy(model).requires_grad_(False)
        self.opt = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, weight_decay=cfg.weight_decay, foreach=False
        )

    def draw_inputs(self, x0: torch.Tensor, class_ids: Optional[torch.Tensor], stream: RngStream):
        """Noise, branch times and label dropout for one batch, all from ``stream``."""
        B = x0.shape[0]
        x1 = rng_normal(stream, tuple(x0.shape), dtype=x0.dtype)
        t1 = sample_time(self.cfg.time_scheme, stream, n=B)
        times = assign_branch_times(t1, self.model.cfg.k, self.cfg.alpha, stream)
        labels = drop_labels(class_ids, self.model.cfg.label_dropout_prob, self.model.null_class, stream)
        return x1, times, labels

    def loss(self, x0, class_ids, stream: RngStream, model: Optional[DeepFlow] = None):
        x1, times, labels = self.draw_inputs(x0, class_ids, stream)
        return objective(model or self.model, x0, x1, times, labels, self.betas, self.cfg.lam)

    def train_step(self, x0: torch.Tensor, class_ids: Optional[torch.Tensor] = None) -> LossBreakdown:
        total, bd = self.loss(x0, class_ids, self.stream)
        if not torch.isfinite(total):
            raise NonFiniteError(f"non-finite loss at step {self.step}: {bd}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.update_ema()
        self.step += 1
        self.last_breakdown = bd
        return bd

    @torch.no_grad()
    def update_ema(self):
        rho = self.cfg.ema_decay
        for pe, p in zip(self.ema.parameters(), self.model.parameters()):
            pe.mul_(rho).add_(p.detach(), alpha=1 - rho)

    @torch.no_grad()
    def init_breakdown(self, x0, class_ids) -> LossBreakdown:
        """Loss at the current weights on a side stream, leaving the training stream untouched."""
        _, bd = self.loss(x0, class_ids, self.stream.child("init-eval"))
        return bd


def sample_batch(data: torch.Tensor, labels: Optional[torch.Tensor], batch_size: int, stream: RngStream):
    idx = torch.from_numpy(stream.integers(data.shape[0], batch_size))
    return data[idx], (labels[idx] if labels is not None else None)


# ---------------------------------------------------------------- loop


def train_loop(run, data: torch.Tensor, labels: Optional[torch.Tensor], out_dir, trainer: Optional[Trainer] = None):
    """Train for ``run.train.steps`` steps writing ``metrics.csv`` and checkpoints to ``out_dir``.

    ``run`` is a :class:`deepflow.config.RunConfig`.  Passing a ``trainer``
    restored from a checkpoint resumes; the CSV is then appended to.
    """
    from .checkpoint import save_checkpoint

    cfg = run.train
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    if trainer is None:
        model = DeepFlow(run.model, RngStream(run.seed, stream_id=INIT_STREAM_ID))
        trainer = Trainer(model, cfg, RngStream(run.seed, stream_id=1))
    if run.model.num_classes == 0:
        labels = None
    k = run.model.k
    n_acc = k - 1 if run.model.has_acc else 0
    metrics_path = out_dir / "metrics.csv"
    resuming = trainer.step > 0
    fh = open(metrics_path, "a" if resuming else "w", newline="", encoding="utf-8")
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        if not resuming:
            w.writerow(metrics_header(k, n_acc))
            xb, yb = sample_batch(data, labels, cfg.batch_size, trainer.stream.child("init-batch"))
            w.writerow(trainer.init_breakdown(xb, yb).row(0, cfg.lr))
            if cfg.steps > 0:
                save_checkpoint(out_dir / "ckpt_0000000.dfckpt", run, trainer)
        while trainer.step < cfg.steps:
            xb, yb = sample_batch(data, labels, cfg.batch_size, trainer.stream)
            bd = trainer.train_step(xb, yb)
            s = trainer.step
            if s % cfg.log_interval == 0:
                w.writerow(bd.row(s, cfg.lr))
                fh.flush()
                log.info("step %d total %.5f deep %.5f acc %.5f", s, bd.total, bd.deep_star, bd.acc_total)
            if cfg.save_interval and s % cfg.save_interval == 0:
                save_checkpoint(out_dir / f"ckpt_{s:07d}.dfckpt", run, trainer)
    save_checkpoint(out_dir / "ckpt_final", run, trainer)
    return trainer
