"""Baseline vs generator-layer accuracy as a function of the augmentation noise.

Stage 3 is skipped to keep the sweep cheap; each point trains stage 1 once
and both stage-2 variants on top of it.
"""

import argparse
import dataclasses

from conceptgcd.dataset import SyntheticSpec, generate_synthetic
from conceptgcd.evaluation import evaluate_model
from conceptgcd.numerics import RngState
from conceptgcd.trainer import TrainConfig, run_stage1, run_stage2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3, 0.45, 0.6])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=7)
    args = ap.parse_args()

    ds = generate_synthetic(SyntheticSpec(), RngState(args.data_seed))
    print(f"{'sigma':>6} {'baseline':>9} {'stage2':>7} {'novel(b)':>9} {'novel(s2)':>10}")
    for sigma in args.sigmas:
        cfg = TrainConfig(seed=args.seed, sigma_aug=sigma)
        s1 = run_stage1(ds, cfg)
        b = evaluate_model(run_stage2(s1.model, ds, dataclasses.replace(cfg, gl_depth=0)).model, ds)
        g = evaluate_model(run_stage2(s1.model, ds, cfg).model, ds)
        print(f"{sigma:6.2f} {b.acc_all:9.3f} {g.acc_all:7.3f} {b.acc_novel:9.3f} {g.acc_novel:10.3f}", flush=True)


if __name__ == "__main__":
    main()
