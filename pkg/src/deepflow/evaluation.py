"""Desk-scale sample-quality metrics and the inter-branch feature-distance diagnostic."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .datasets import DatasetSpec, generate
from .foundation import RngStream
from .network import DeepFlow
from .sampling import ModelVelocity, SamplerConfig, sample

REPORT_HEADER = ["run_id", "seed", "n", "sliced_w2", "mean_err", "cov_err", "feat_dist_pre", "feat_dist_post"]


def _as_points(A) -> np.ndarray:
    A = np.asarray(A.detach() if isinstance(A, torch.Tensor) else A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    return A.reshape(A.shape[0], -1)


def _quantiles(sorted_vals: np.ndarray, m: int) -> np.ndarray:
    levels = (np.arange(m) + 0.5) / m
    return np.quantile(sorted_vals, levels, axis=0, method="inverted_cdf")


def sliced_wasserstein(A, B, n_projections: int = 128, stream: Optional[RngStream] = None) -> float:
    """sqrt of the mean over random unit directions of the squared 1D W2 between projections."""
    A, B = _as_points(A), _as_points(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("sliced_wasserstein needs non-empty point sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    stream = stream or RngStream(0, 0x51CED)
    dirs = stream.normal((A.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa = np.sort(A @ dirs, axis=0)
    pb = np.sort(B @ dirs, axis=0)
    if pa.shape[0] != pb.shape[0]:
        m = max(pa.shape[0], pb.shape[0])
        pa, pb = _quantiles(pa, m), _quantiles(pb, m)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def moment_stats(A, B) -> tuple[float, float]:
    """(L2 distance of means, Frobenius distance of covariances)."""
    A, B = _as_points(A), _as_points(B)
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError("moment_stats needs at least 2 points per set")
    mean_err = float(np.linalg.norm(A.mean(0) - B.mean(0)))
    cov_err = float(np.linalg.norm(np.atleast_2d(np.cov(A, rowvar=False)) - np.atleast_2d(np.cov(B, rowvar=False))))
    return mean_err, cov_err


@dataclass
class MetricReport:
    sliced_w2: float
    mean_err: float
    cov_err: float
    n_generated: int
    n_reference: int
    seed: int
    feat_dist_pre: Optional[float] = None
    feat_dist_post: Optional[float] = None
    run_id: str = ""

    def row(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))
        return [self.run_id, self.seed, self.n_generated, repr(self.sliced_w2), repr(self.mean_err),
                repr(self.cov_err), fmt(self.feat_dist_pre), fmt(self.feat_dist_post)]


def write_reports(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------- feature distance


@dataclass
class FeatureDistanceTrace:
    per_timestep: list = field(default_factory=list)  # (t, mean distance)
    branch_pair: tuple = (1, 2)
    mode: str = "post"

    @property
    def overall_mean(self) -> float:
        return float(np.mean([d for _, d in self.per_timestep])) if self.per_timestep else 0.0


def feature_distance(a: torch.Tensor, b: torch.Tensor, normalize: str = "frobenius") -> torch.Tensor:
    """Per-sample distance between (B, N, D) feature maps."""
    diff = (a - b).reshape(a.shape[0], -1)
    d = torch.linalg.vector_norm(diff, dim=1)
    if normalize == "per_token":
        d = d / np.sqrt(a.shape[1])
    elif normalize != "frobenius":
        raise ValueError(f"unknown normalisation {normalize!r}")
    return d


class FeatureRecorder:
    """Sampler callback collecting pre-/post-VeRA distances to a later branch's v* at every solver step."""

    def __init__(self, velocity: ModelVelocity, branch_pair=(1, 2), normalize: str = "frobenius", steps: int = 0):
        self.velocity = velocity
        self.i, self.j = branch_pair
        self.normalize = normalize
        self.steps = steps
        self.pre = FeatureDistanceTrace(branch_pair=branch_pair, mode="pre")
        self.post = FeatureDistanceTrace(branch_pair=branch_pair, mode="post")

    def __call__(self, step, t, x, v):
        if step >= self.steps:
            return
        out = self.velocity.last
        target = out.vstar[self.j - 1]
        pre = feature_distance(out.vstar[self.i - 1], target, self.normalize)
        self.pre.per_timestep.append((t, float(pre.mean())))
        if out.refined:
            post = feature_distance(out.refined[self.i - 1], target, self.normalize)
            self.post.per_timestep.append((t, float(post.mean())))


def _check_pair(model: DeepFlow, branch_pair):
    k = model.cfg.k
    if k < 2:
        raise ValueError("feature distance requires k >= 2")
    i, j = branch_pair
    if not (1 <= i < j <= k):
        raise ValueError(f"invalid branch pair {branch_pair} for k={k}")


def sample_with_features(model: DeepFlow, cfg: SamplerConfig, n: int, class_ids, stream: RngStream,
                         branch_pair=(1, 2), normalize: str = "frobenius"):
    """Sample while recording the feature-distance traces; returns (samples, recorder)."""
    _check_pair(model, branch_pair)
    vel = ModelVelocity(model, class_ids, cfg.cfg_scale)
    rec = FeatureRecorder(vel, branch_pair, normalize, cfg.steps)
    x, _ = sample(vel, cfg, n, None, stream, data_shape=model.cfg.data_shape, callback=rec)
    return x, rec


def feature_distance_trace(model: DeepFlow, sampler_cfg: SamplerConfig, n_samples: int, branch_pair=(1, 2),
                           stream: Optional[RngStream] = None, mode: str = "post", class_ids=None,
                           normalize: str = "frobenius") -> FeatureDistanceTrace:
    if mode not in ("pre", "post"):
        raise ValueError(f"mode must be 'pre' or 'post', got {mode!r}")
    stream = stream or RngStream(0, 7)
    if class_ids is None and model.y_embedder is not None:
        class_ids = torch.from_numpy(stream.child("classes").integers(model.cfg.num_classes, n_samples))
    _, rec = sample_with_features(model, sampler_cfg, n_samples, class_ids, stream, branch_pair, normalize)
    if mode == "post" and not rec.post.per_timestep:
        raise ValueError("post-VeRA features need a model with VeRA blocks")
    return rec.pre if mode == "pre" else rec.post


def write_trace_csv(path, pre: FeatureDistanceTrace, post: Optional[FeatureDistanceTrace]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "dist_pre", "dist_post"])
        for s, (t, d) in enumerate(pre.per_timestep):
            dp = post.per_timestep[s][1] if post and post.per_timestep else ""
            w.writerow([s, repr(t), repr(d), repr(dp) if dp != "" else ""])


# ---------------------------------------------------------------- evaluate


def evaluate_run(model, spec: DatasetSpec, n: int, stream: RngStream, sampler_cfg: Optional[SamplerConfig] = None,
                 run_id: str = "", n_projections: int = 128, features: bool = True) -> MetricReport:
    """Generate ``n`` samples and compare them with a fresh reference draw.

    ``model`` is a :class:`DeepFlow` or any callable ``(n, stream, class_ids) -> samples``;
    ``class_ids`` are the reference draw's labels (None for unconditional data), which a
    conditional model is sampled with so that class-proportion noise cancels.
    """
    if n < 1:
        raise ValueError("evaluate_run needs n >= 1 (empty sample set)")
    sampler_cfg = sampler_cfg or SamplerConfig()
    pre = post = None
    gen_stream = stream.child("generate")
    ref, ref_labels = generate(spec, stream.child("reference"), n)
    if isinstance(model, DeepFlow):
        class_ids = ref_labels if model.y_embedder is not None else None
        if features and model.cfg.k >= 2:
            x, rec = sample_with_features(model, sampler_cfg, n, class_ids, gen_stream)
            pre = rec.pre.overall_mean
            post = rec.post.overall_mean if rec.post.per_timestep else None
        else:
            x, _ = sample(model, sampler_cfg, n, class_ids, gen_stream)
    else:
        x = model(n, gen_stream, ref_labels)
    sw = sliced_wasserstein(x.reshape(n, -1), ref.reshape(n, -1), n_projections, stream.child("projections"))
    mean_err, cov_err = moment_stats(x.reshape(n, -1), ref.reshape(n, -1))
    return MetricReport(sw, mean_err, cov_err, n, n, stream.seed, pre, post, run_id)
