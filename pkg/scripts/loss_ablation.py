"""Loss ablation on the toy fixture: global only, plus cross-view objects, plus cross-image objects."""
import argparse
import logging

import numpy as np

from objboot.config import load_config
from objboot.train import evaluate_params, load_state, run_pretrain

ROWS = {
    "global": (True, False, False),
    "global + cv-object": (True, True, False),
    "global + cv-object + ci-object": (True, True, True),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/loss_ablation")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--ratio", type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)
    seeds = [int(s) for s in args.seeds.split(",")]

    print(f"{'losses':<32} {'kNN mIoU':>9} {'std':>5}")
    for name, (g, cv, ci) in ROWS.items():
        scores = []
        for seed in seeds:
            cfg = load_config(overrides={"train.seed": str(seed), "train.epochs": str(args.epochs),
                                         "loss.enable_global": str(g), "loss.enable_cv_object": str(cv),
                                         "loss.enable_ci_object": str(ci)})
            tag = name.replace(" + ", "+").replace(" ", "")
            last, _ = run_pretrain(cfg, f"{args.out}/{tag}/seed{seed}")
            state, _ = load_state(last)
            scores.append(evaluate_params(state.teacher, cfg, ratios=(args.ratio,))[0]["knn_miou"])
        print(f"{name:<32} {100 * np.mean(scores):9.1f} {100 * np.std(scores):5.1f}")


if __name__ == "__main__":
    main()
