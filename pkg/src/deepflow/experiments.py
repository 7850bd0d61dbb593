"""Desk-scale experiment protocol shared by the acceptance tests, ``deepflow ablate`` and ``scripts/``.

The ablation ladder adds one component per rung:

    baseline    k=1 flow transformer with the same total depth
    deep_sup    k=2 branches, deep supervision, identical branch times
    time_gap    + branch time gaps (alpha) and gap-conditioned AdaLN between branches
    acc         + acceleration MLP, concatenation and second-order loss
    cross_attn  + cross-space attention (the full VeRA block)
"""
from __future__ import annotations

import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .datasets import DatasetSpec, generate, reference_baseline
from .evaluation import MetricReport, evaluate_run, sliced_wasserstein
from .foundation import RngStream
from .network import INIT_STREAM_ID, DeepFlow, ModelConfig, param_count
from .sampling import SamplerConfig, step_sensitivity_sweep
from .training import TrainConfig, Trainer, sample_batch

log = logging.getLogger(__name__)

COMPONENTS = ("baseline", "deep_sup", "time_gap", "acc", "cross_attn")


def component_config(name: str, model: ModelConfig, train: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    """Model/train configs for one rung of the ladder; ``model`` describes the full model."""
    if name not in COMPONENTS:
        raise ValueError(f"unknown component {name!r}; choose from {COMPONENTS}")
    total_depth = model.k * model.depth_per_branch
    m = dataclasses.replace
    if name == "baseline":
        return m(model, k=1, depth_per_branch=total_depth), m(train, betas=None)
    k2 = dict(k=model.k, depth_per_branch=model.depth_per_branch)
    if name == "deep_sup":
        return m(model, use_vera=False, **k2), m(train, alpha=0.0)
    if name == "time_gap":
        return m(model, use_vera=True, use_acc=False, use_cross_attn=False, vera_variant="concat", **k2), train
    if name == "acc":
        return m(model, use_vera=True, use_acc=True, use_cross_attn=False, **k2), train
    return m(model, use_vera=True, use_acc=True, use_cross_attn=True, **k2), train


def match_params(cfg: ModelConfig, target: int) -> ModelConfig:
    """Pick the MLP width of the transformer blocks so the parameter count is as close to ``target`` as possible."""
    if cfg.depth_per_branch == 0:
        return cfg
    best, best_err = cfg, abs(param_count(cfg) - target)
    for h in range(1, 64 * cfg.hidden + 1):
        c = dataclasses.replace(cfg, mlp_ratio=h / cfg.hidden)
        err = abs(param_count(c) - target)
        if err < best_err:
            best, best_err = c, err
        elif param_count(c) > target:
            break
    return best


@dataclass
class DeskProtocol:
    """Fixed protocol for the directional experiments (8 Gaussians, D=64)."""

    hidden: int = 64
    heads: int = 4
    depth_per_branch: int = 2
    k: int = 2
    freq_dim: int = 64
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    ema_decay: float = 0.999
    alpha: float = 0.01
    lam: float = 1.0
    n_train: int = 20_000
    n_eval: int = 4000
    sampler_steps: int = 250
    match_params: bool = True
    dataset: str = "eight_gaussians"

    def full_model(self) -> ModelConfig:
        spec = DatasetSpec(self.dataset)
        return ModelConfig(
            k=self.k, depth_per_branch=self.depth_per_branch, hidden=self.hidden, heads=self.heads,
            num_classes=spec.num_classes, freq_dim=self.freq_dim,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, steps=self.steps, ema_decay=self.ema_decay,
            alpha=self.alpha, lam=self.lam, log_interval=max(1, self.steps // 10),
        )

    def run_config(self, component: str, seed: int) -> RunConfig:
        full = self.full_model()
        model, train = component_config(component, full, self.train_config())
        if self.match_params and component != "cross_attn":
            model = match_params(model, param_count(full))
        return RunConfig(
            model=model, train=train,
            sampler=SamplerConfig(kind="sde", steps=self.sampler_steps),
            data=DatasetSpec(self.dataset, n=self.n_train, seed=seed), seed=seed,
        )


@dataclass
class CellResult:
    component: str
    seed: int
    params: int
    report: MetricReport
    model: Optional[DeepFlow] = None
    seconds: float = 0.0
    final_loss: float = float("nan")


def train_model(run: RunConfig, progress: bool = False) -> Trainer:
    data, labels = generate(run.data, RngStream(run.data.seed, stream_id=0))
    if run.model.num_classes == 0:
        labels = None
    trainer = Trainer(DeepFlow(run.model, RngStream(run.seed, stream_id=INIT_STREAM_ID)), run.train,
                      RngStream(run.seed, stream_id=1))
    while trainer.step < run.train.steps:
        xb, yb = sample_batch(data, labels, run.train.batch_size, trainer.stream)
        bd = trainer.train_step(xb, yb)
        if progress and trainer.step % run.train.log_interval == 0:
            log.info("step %d total %.4f", trainer.step, bd.total)
    return trainer


def eval_seed_stream(seed: int) -> RngStream:
    return RngStream(seed, stream_id=0xE7A1)


def run_cell(protocol: DeskProtocol, component: str, seed: int, keep_model: bool = True) -> CellResult:
    run = protocol.run_config(component, seed)
    t0 = time.perf_counter()
    trainer = train_model(run)
    model = trainer.ema.eval()
    report = evaluate_run(model, run.data, protocol.n_eval, eval_seed_stream(seed), run.sampler,
                          run_id=f"{component}-s{seed}")
    res = CellResult(component, seed, param_count(run.model), report, model if keep_model else None,
                     time.perf_counter() - t0)
    if trainer.last_breakdown is not None:
        res.final_loss = trainer.last_breakdown.total
    log.info("%s seed %d: sliced_w2 %.4f (%.0fs)", component, seed, report.sliced_w2, res.seconds)
    return res


def median_by_component(results: Sequence[CellResult]) -> dict[str, float]:
    out: dict[str, list] = {}
    for r in results:
        out.setdefault(r.component, []).append(r.report.sliced_w2)
    return {k: statistics.median(v) for k, v in out.items()}


def noise_floor(protocol: DeskProtocol, seed: int) -> float:
    spec = DatasetSpec(protocol.dataset, n=protocol.n_eval, seed=seed)
    s = eval_seed_stream(seed)
    return reference_baseline(spec, protocol.n_eval, s.child("floor-a"), s.child("floor-b"))


def step_sweep(protocol: DeskProtocol, model: DeepFlow, seed: int, steps_list=(50, 100, 150, 200, 250)):
    """Sliced W2 against one fixed reference draw at each sampler step count."""
    spec = DatasetSpec(protocol.dataset, n=protocol.n_eval, seed=seed)
    s = eval_seed_stream(seed)
    ref, ref_labels = generate(spec, s.child("reference"), protocol.n_eval)
    proj = s.child("projections")
    metric = lambda x: sliced_wasserstein(x, ref, 128, RngStream(proj.seed, proj.stream_id))
    classes = ref_labels if model.y_embedder is not None else None
    return step_sensitivity_sweep(model, steps_list, metric, protocol.n_eval, s.child("generate"),
                                  SamplerConfig(kind="sde"), classes)
