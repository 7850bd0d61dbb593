"""``deepflow {train|sample|eval|diagnose|ablate}`` command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments,
3 unreadable or incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_override, load_config, parse_json
from .datasets import DatasetSpec, generate, reference_baseline, write_points_csv, write_tensor_file
from .evaluation import (
    REPORT_HEADER,
    MetricReport,
    evaluate_run,
    sample_with_features,
    moment_stats,
    write_reports,
    write_trace_csv,
)
from .experiments import COMPONENTS, component_config, eval_seed_stream, match_params
from .foundation import NonFiniteError, RngStream
from .network import param_count
from .sampling import SamplerConfig, sample
from .training import train_loop

log = logging.getLogger("deepflow")

# short names accepted as ablation grid axes
GRID_ALIASES = {
    "alpha": "train.alpha",
    "lambda": "train.lam",
    "lam": "train.lam",
    "betas": "train.betas",
    "time_scheme": "train.time_scheme",
    "vera_variant": "model.vera_variant",
    "accmlp_multipliers": "model.accmlp_multipliers",
    "k": "model.k",
    "use_vera": "model.use_vera",
    "use_acc": "model.use_acc",
    "use_cross_attn": "model.use_cross_attn",
}


class UsageError(ValueError):
    pass


def _threads() -> None:
    raw = os.environ.get("DEEPFLOW_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"DEEPFLOW_THREADS must be a positive integer, got {raw!r}") from None
    torch.set_num_threads(n)


def _out_dir(args, run: Optional[RunConfig] = None) -> Path:
    out = Path(args.out) if args.out else Path(run.out_dir if run else "runs/default")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    return out


def _resolve_run(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    run = run.with_overrides(args.set or [])
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if args.out:
        run = dataclasses.replace(run, out_dir=str(args.out))
    return run


def _snapshot(out: Path, payload: dict, name: str = "config.json") -> None:
    (out / name).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _train_data(run: RunConfig):
    data, labels = generate(run.data, RngStream(run.data.seed, stream_id=0))
    return data, labels


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    run = _resolve_run(args)
    out = _out_dir(args, run)
    (out / "config.json").write_text(run.to_json(), encoding="utf-8")
    data, labels = _train_data(run)
    trainer = train_loop(run, data, labels, out)
    print(f"trained {trainer.step} steps ({param_count(run.model)} parameters) -> {out}")
    return 0


# ---------------------------------------------------------------- sample


def _sampler_from_args(run: RunConfig, args) -> SamplerConfig:
    d = run.sampler.to_dict()
    for override in args.set or []:
        key = override.split("=", 1)[0]
        if not key.startswith("sampler."):
            raise ConfigError("only sampler.* keys can be overridden here", key)
        tmp = {"sampler": d}
        apply_override(tmp, override)
    if getattr(args, "steps", None) is not None:
        d["steps"] = args.steps
    if getattr(args, "kind", None) is not None:
        d["kind"] = args.kind
    if getattr(args, "cfg_scale", None) is not None:
        d["cfg_scale"] = args.cfg_scale
    try:
        return SamplerConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), "sampler") from e


def _scatter_png(path: Path, x, labels=None, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    c = labels.numpy() if labels is not None else None
    ax.scatter(x[:, 0].numpy(), x[:, 1].numpy(), s=1, c=c, cmap="tab10" if c is not None else None)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _grid_png(path: Path, x) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = min(16, x.shape[0])
    fig, axes = plt.subplots(1, m, figsize=(m, 1.2), dpi=100, squeeze=False)
    for i in range(m):
        axes[0, i].imshow(x[i, 0].numpy(), cmap="gray")
        axes[0, i].axis("off")
    fig.savefig(path)
    plt.close(fig)


def cmd_sample(args) -> int:
    run, trainer = load_checkpoint(args.ckpt)
    model = trainer.ema.eval()
    scfg = _sampler_from_args(run, args)
    seed = args.seed if args.seed is not None else run.seed
    n = args.n
    if n < 1:
        raise UsageError("-n must be >= 1")
    class_ids = None
    if model.y_embedder is not None:
        if args.class_id is not None:
            if not 0 <= args.class_id < run.model.num_classes:
                raise UsageError(f"--class must lie in [0, {run.model.num_classes})")
            class_ids = torch.full((n,), args.class_id, dtype=torch.long)
        else:
            class_ids = torch.from_numpy(RngStream(seed, 0xC1A5).integers(run.model.num_classes, n))
    elif args.class_id is not None:
        raise UsageError("--class given but the checkpoint is unconditional")
    out = _out_dir(args)
    x, _ = sample(model, scfg, n, class_ids, RngStream(seed, stream_id=0x5A3F))
    if run.model.geometry == "point":
        path = out / "samples.csv"
        write_points_csv(path, x, class_ids)
    else:
        path = out / "samples.dftens"
        write_tensor_file(path, x)
    _snapshot(out, {"command": "sample", "checkpoint": str(args.ckpt), "seed": seed, "n": n,
                    "class": args.class_id, "sampler": scfg.to_dict()})
    if args.png:
        if run.model.geometry == "point":
            _scatter_png(out / "samples.png", x, class_ids, f"{scfg.kind}, {scfg.steps} steps")
        else:
            _grid_png(out / "samples.png", x)
    print(f"wrote {n} samples -> {path}")
    return 0


# ---------------------------------------------------------------- eval


def floor_report(spec: DatasetSpec, n: int, seed: int, n_projections: int = 128) -> MetricReport:
    """Two independent class-matched reference draws scored like a model: the metric's noise floor."""
    s = eval_seed_stream(seed)
    a_stream, b_stream = s.child("floor-a"), s.child("floor-b")
    sw = reference_baseline(DatasetSpec(spec.name, n, spec.noise_std, spec.seed), n, a_stream, b_stream,
                            n_projections)
    a, ya = generate(spec, s.child("floor-a"), n)
    b, _ = generate(spec, s.child("floor-b"), n, labels=ya)
    mean_err, cov_err = moment_stats(a.reshape(n, -1), b.reshape(n, -1))
    return MetricReport(sw, mean_err, cov_err, n, n, seed, None, None, "reference_baseline")


def evaluate_checkpoint(run: RunConfig, model, n: int, seeds: Sequence[int], sampler_cfg=None):
    reports = []
    for s in seeds:
        rep = evaluate_run(model, run.data, n, eval_seed_stream(s), sampler_cfg or run.sampler, run_id=f"seed{s}")
        reports.append(rep)
    reports.append(floor_report(run.data, n, seeds[0]))
    return reports


def _parse_ints(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what} is empty")
    return vals


def cmd_eval(args) -> int:
    run, trainer = load_checkpoint(args.ckpt)
    scfg = _sampler_from_args(run, args)
    seeds = _parse_ints(args.seeds, "--seeds")
    out = _out_dir(args)
    reports = evaluate_checkpoint(run, trainer.ema.eval(), args.n, seeds, scfg)
    write_reports(out / "eval.csv", reports)
    _snapshot(out, {"command": "eval", "checkpoint": str(args.ckpt), "n": args.n, "seeds": seeds,
                    "sampler": scfg.to_dict()})
    for r in reports:
        print(f"{r.run_id}: sliced_w2 {r.sliced_w2:.5f}")
    return 0


# ---------------------------------------------------------------- diagnose


def _trace_png(path: Path, pre, post) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
    ax.plot([t for t, _ in pre.per_timestep], [d for _, d in pre.per_timestep], label="pre-VeRA")
    if post is not None and post.per_timestep:
        ax.plot([t for t, _ in post.per_timestep], [d for _, d in post.per_timestep], label="post-VeRA")
    ax.set_xlabel("t")
    ax.set_ylabel("feature distance")
    ax.invert_xaxis()
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_diagnose(args) -> int:
    run, trainer = load_checkpoint(args.ckpt)
    model = trainer.ema.eval()
    pair = tuple(_parse_ints(args.pair, "--pair"))
    if len(pair) != 2:
        raise UsageError("--pair needs two branch indices, e.g. 1,2")
    scfg = _sampler_from_args(run, args)
    seed = args.seed if args.seed is not None else run.seed
    class_ids = None
    if model.y_embedder is not None:
        class_ids = torch.from_numpy(RngStream(seed, 0xC1A5).integers(run.model.num_classes, args.n))
    _, rec = sample_with_features(model, scfg, args.n, class_ids, RngStream(seed, 0xD1A6), pair)
    pre, post = rec.pre, (rec.post if rec.post.per_timestep else None)
    out = _out_dir(args)
    write_trace_csv(out / "trace.csv", pre, post)
    _trace_png(out / "trace.png", pre, post)
    _snapshot(out, {"command": "diagnose", "checkpoint": str(args.ckpt), "pair": list(pair), "n": args.n,
                    "seed": seed, "sampler": scfg.to_dict()})
    msg = f"pre-VeRA mean {pre.overall_mean:.5f}"
    if post is not None:
        msg += f", post-VeRA mean {post.overall_mean:.5f}"
    print(msg)
    return 0


# ---------------------------------------------------------------- ablate


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of the grid axes in file order; each cell maps axis -> value."""
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("ablation grid is empty", "grid")
    axes = []
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError("each grid axis needs a non-empty list of values", f"grid.{key}")
        axes.append([(key, v) for v in values])
    return [dict(cell) for cell in itertools.product(*axes)]


def cell_config(base: RunConfig, cell: dict) -> RunConfig:
    d = base.to_dict()
    component = None
    for key, value in cell.items():
        if key in ("component", "components"):
            component = value
            continue
        path = GRID_ALIASES.get(key, key)
        apply_override(d, f"{path}={json.dumps(value)}")
    run = RunConfig.from_dict(d)
    if component is not None:
        if component not in COMPONENTS:
            raise ConfigError(f"unknown component {component!r}; choose from {COMPONENTS}", "grid.component")
        model, train = component_config(component, run.model, run.train)
        if component != "cross_attn":
            # ablated rungs are re-widened to the full model's parameter count
            model = match_params(model, param_count(run.model))
        run = dataclasses.replace(run, model=model, train=train)
    return run


def load_grid(path, overrides: Sequence[str], seed: Optional[int]):
    doc = parse_json(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ConfigError("grid file must be a JSON object")
    unknown = set(doc) - {"base", "grid", "eval"}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}; allowed: base, grid, eval", "<root>")
    base = RunConfig.from_dict(doc.get("base", {})).with_overrides(list(overrides))
    if seed is not None:
        base = dataclasses.replace(base, seed=seed)
    cells = expand_grid(doc.get("grid", {}))
    ev = doc.get("eval", {})
    bad = set(ev) - {"n", "seeds"}
    if bad:
        raise ConfigError(f"unknown key(s) {sorted(bad)}; allowed: n, seeds", "eval")
    n = int(ev.get("n", 2000))
    seeds = [int(s) for s in ev.get("seeds", [base.seed])]
    return base, cells, n, seeds


def cmd_ablate(args) -> int:
    if not args.config:
        raise UsageError("ablate needs --config GRID.json")
    base, cells, n, seeds = load_grid(args.config, args.set or [], args.seed)
    out = _out_dir(args, base)
    runs = [cell_config(base, c) for c in cells]
    _snapshot(out, {"command": "ablate", "base": base.to_dict(), "cells": cells, "eval": {"n": n, "seeds": seeds}})
    header = ["cell", "settings", "params", "final_loss"] + REPORT_HEADER
    rows = []
    for i, (cell, run) in enumerate(zip(cells, runs)):
        cell_dir = out / f"cell_{i:03d}"
        run = dataclasses.replace(run, out_dir=str(cell_dir))
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "config.json").write_text(run.to_json(), encoding="utf-8")
        data, labels = _train_data(run)
        trainer = train_loop(run, data, labels, cell_dir)
        final = trainer.last_breakdown.total if trainer.last_breakdown is not None else float("nan")
        reports = [evaluate_run(trainer.ema.eval(), run.data, n, eval_seed_stream(s), run.sampler,
                                run_id=f"cell{i}-seed{s}") for s in seeds]
        write_reports(cell_dir / "eval.csv", reports)
        for r in reports:
            rows.append([i, json.dumps(cell, sort_keys=True), param_count(run.model), repr(final)] + r.row())
        log.info("cell %d %s: sliced_w2 %s", i, cell, [round(r.sliced_w2, 5) for r in reports])
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"{len(cells)} cells -> {out / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (grid JSON for ablate)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field; repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deepflow", description="Deeply supervised flow models at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model from a run config")

    sp = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint's EMA weights")
    sp.add_argument("ckpt")
    sp.add_argument("-n", type=int, default=1000)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--kind", choices=("ode", "sde"))
    sp.add_argument("--cfg-scale", type=float, dest="cfg_scale")
    sp.add_argument("--class", type=int, dest="class_id")
    sp.add_argument("--png", action="store_true", help="also write samples.png")

    ep = sub.add_parser("eval", parents=[common], help="score a checkpoint against reference draws")
    ep.add_argument("ckpt")
    ep.add_argument("-n", type=int, default=4000)
    ep.add_argument("--seeds", default="0,1,2")
    ep.add_argument("--steps", type=int)
    ep.add_argument("--kind", choices=("ode", "sde"))

    dp = sub.add_parser("diagnose", parents=[common], help="feature-distance trace between two branches")
    dp.add_argument("ckpt")
    dp.add_argument("--pair", default="1,2")
    dp.add_argument("-n", type=int, default=256)
    dp.add_argument("--steps", type=int)
    dp.add_argument("--kind", choices=("ode", "sde"))

    sub.add_parser("ablate", parents=[common], help="train and evaluate every cell of a grid")
    return p


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "diagnose": cmd_diagnose,
            "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _threads()
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"deepflow {args.command}: error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"deepflow {args.command}: checkpoint error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError, NonFiniteError) as e:
        print(f"deepflow {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
