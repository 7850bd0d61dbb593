"""Train and score the desk-scale ladder on 8 Gaussians; one CSV row per (component, seed).

    python scripts/run_desk.py --components baseline,deep_sup,cross_attn --seeds 0,1,2 --out desk.csv

Add ``--sweep`` to also record the sampler step-count sweep of every cell.
"""
import argparse
import csv
import dataclasses
import logging
import os

import torch

from deepflow.evaluation import REPORT_HEADER
from deepflow.experiments import COMPONENTS, DeskProtocol, median_by_component, noise_floor, run_cell, step_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--components", default=",".join(COMPONENTS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, help="training steps (protocol default 5000)")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--out", default="desk.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(int(os.environ.get("DEEPFLOW_THREADS", "1")))

    protocol = DeskProtocol()
    if args.steps is not None:
        protocol = dataclasses.replace(protocol, steps=args.steps)
    components = args.components.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]

    cells = []
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "seed", "params", "seconds", "final_loss", "floor", "sweep_mean", "sweep_std"]
                   + REPORT_HEADER)
        for seed in seeds:
            floor = noise_floor(protocol, seed)
            for comp in components:
                cell = run_cell(protocol, comp, seed)
                cells.append(cell)
                sweep = ("", "")
                if args.sweep:
                    _, s = step_sweep(protocol, cell.model, seed)
                    sweep = (s["mean"], s["std"])
                w.writerow([comp, seed, cell.params, round(cell.seconds, 1), cell.final_loss, floor, *sweep]
                           + cell.report.row())
                fh.flush()
    for comp, med in median_by_component(cells).items():
        print(f"{comp:>11}  median sliced_w2 {med:.4f}")


if __name__ == "__main__":
    main()
