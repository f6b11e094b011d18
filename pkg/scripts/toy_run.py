"""Pretrain on the default synthetic fixture and compare dense k-NN mIoU against the random-init encoder."""
import argparse
import logging
import time

from objboot.config import load_config
from objboot.train import epoch_summary, evaluate_params, init_state, load_state, read_metrics, run_pretrain


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/toy")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--ratios", default="1,8")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    overrides = {"train.seed": str(args.seed)}
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    cfg = load_config(overrides=overrides)
    ratios = tuple(int(r) for r in args.ratios.split(","))

    start = time.perf_counter()
    last, metrics = run_pretrain(cfg, args.out)
    print(f"trained {cfg.train.epochs} epochs in {time.perf_counter() - start:.0f}s")
    summary = epoch_summary(read_metrics(metrics))
    for epoch in sorted({1, max(summary)}):
        s = summary[epoch]
        print(f"epoch {epoch:>3}: l_total {s['l_total']:.3f}  bootstrap ratio {s['bootstrap_ratio']:.3f}")

    state, _ = load_state(last)
    trained = evaluate_params(state.teacher, cfg, ratios)
    random_init = evaluate_params(init_state(cfg).teacher, cfg, ratios)
    print("ratio  trained  random-init")
    for t, r in zip(trained, random_init):
        print(f"{t['ratio']:>5}  {100 * t['knn_miou']:7.1f}  {100 * r['knn_miou']:11.1f}")


if __name__ == "__main__":
    main()
