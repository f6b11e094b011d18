"""Clustering ablation: Sinkhorn with and without positional cues against K-Means."""
import argparse
import logging

import numpy as np

from objboot.config import load_config
from objboot.train import evaluate_params, load_state, run_pretrain

VARIANTS = {
    "kmeans": {"cluster.method": "kmeans"},
    "sinkhorn, lambda_pos=0": {"cluster.method": "sinkhorn", "cluster.lambda_pos": "0"},
    "sinkhorn, lambda_pos=1": {"cluster.method": "sinkhorn", "cluster.lambda_pos": "1"},
    "sinkhorn, lambda_pos=2": {"cluster.method": "sinkhorn", "cluster.lambda_pos": "2"},
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/cluster_ablation")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--ratio", type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)
    seeds = [int(s) for s in args.seeds.split(",")]

    print(f"{'clustering':<24} {'kNN mIoU':>9} {'std':>5}")
    for name, overrides in VARIANTS.items():
        scores = []
        for seed in seeds:
            cfg = load_config(overrides={**overrides, "train.seed": str(seed), "train.epochs": str(args.epochs)})
            tag = name.replace(", ", "_").replace("=", "")
            last, _ = run_pretrain(cfg, f"{args.out}/{tag}/seed{seed}")
            state, _ = load_state(last)
            scores.append(evaluate_params(state.teacher, cfg, ratios=(args.ratio,))[0]["knn_miou"])
        print(f"{name:<24} {100 * np.mean(scores):9.1f} {100 * np.std(scores):5.1f}")


if __name__ == "__main__":
    main()
