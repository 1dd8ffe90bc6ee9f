"""Baseline / generator / full-pipeline ablation on the synthetic benchmark.

    python scripts/run_ablation.py --seeds 0 1 2 --set sigma_aug=0.3 --out ablation.json
"""

import argparse
import dataclasses
import json
import time

import numpy as np

from conceptgcd.dataset import SyntheticSpec, generate_synthetic
from conceptgcd.evaluation import evaluate_model
from conceptgcd.numerics import RngState
from conceptgcd.trainer import TrainConfig, run_stage1, run_stage2, run_stage3

ROWS = ("baseline", "stage2", "stage3")


def parse_overrides(items):
    out = {}
    for item in items or []:
        key, _, raw = item.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def one_seed(ds, cfg):
    s1 = run_stage1(ds, cfg)
    base = run_stage2(s1.model, ds, dataclasses.replace(cfg, gl_depth=0))
    s2 = run_stage2(s1.model, ds, cfg)
    s3 = run_stage3(s1.model, s2.model, ds, cfg)
    return {name: evaluate_model(r.model, ds).to_dict() for name, r in zip(ROWS, (base, s2, s3))}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--set", action="append", metavar="KEY=VALUE")
    ap.add_argument("--out")
    args = ap.parse_args()

    ds = generate_synthetic(SyntheticSpec(), RngState(args.data_seed))
    overrides = parse_overrides(args.set)
    results = {}
    for seed in args.seeds:
        t0 = time.perf_counter()
        results[seed] = one_seed(ds, TrainConfig.from_dict({**overrides, "seed": seed}))
        accs = "  ".join(f"{k}={results[seed][k]['acc_all']:.3f}" for k in ROWS)
        print(f"seed {seed}: {accs}  ({time.perf_counter() - t0:.0f}s)", flush=True)

    table = np.array([[results[s][k]["acc_all"] for k in ROWS] for s in args.seeds])
    print("mean  " + "  ".join(f"{k}={v:.3f}" for k, v in zip(ROWS, table.mean(0))))
    monotone = all(a <= b <= c for a, b, c in table)
    print(f"per-seed monotone: {monotone}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"overrides": overrides, "results": results}, f, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
