"""Desk-scale run on the synthetic dataset: train both heads, report 1-shot 5-way accuracy.

    python3 scripts/desk_scale.py --epochs 10 --instances 1000
"""
import argparse
import sys
import time

from oneshot.backbone import BackboneConfig
from oneshot.data import gen_synthetic, split
from oneshot.evaluation import build_index, eval_knn, eval_one_shot
from oneshot.training import DESK_LR, TrainConfig, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--instances", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, help="override the per-mode desk learning rate")
    ap.add_argument("--modes", nargs="+", default=["triplet", "siamese"])
    args = ap.parse_args(argv)

    train_ds, test_ds = split(gen_synthetic(args.seed, args.per_class), 0.25, seed=args.seed)
    for mode in args.modes:
        start = time.perf_counter()
        cfg = TrainConfig(mode=mode, epochs=args.epochs, instances_per_epoch=args.instances, lr=args.lr or DESK_LR[mode], seed=args.seed)
        params, _ = train(train_ds, cfg, BackboneConfig.preset("desk"), progress=sys.stdout)
        minutes = (time.perf_counter() - start) / 60
        print(f"{mode}: trained in {minutes:.1f} min")
        print(eval_one_shot(params, mode, test_ds, seed=args.seed).render(mode))
        print(eval_knn(build_index(params, test_ds, mode), 3).render(mode))


if __name__ == "__main__":
    main()
