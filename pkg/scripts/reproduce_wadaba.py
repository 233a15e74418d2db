"""Full-scale reproduction on the WaDaBa images (hours of CPU time).

Trains the full-width backbone with the published schedule (siamese 50 epochs,
triplet 100 epochs, 5000 instances each, lr 0.001, momentum 0.9), then runs the
1-shot protocol and whole-database KNN for k in 3, 5, 7.

    python3 scripts/reproduce_wadaba.py --data /path/to/wadaba --out runs/
"""
import argparse
import sys
from pathlib import Path

from oneshot.backbone import BackboneConfig
from oneshot.data import load_dataset, split
from oneshot.evaluation import build_index, eval_knn, eval_one_shot
from oneshot.formats import Checkpoint, save_checkpoint, save_embeddings
from oneshot.training import TrainConfig, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True, help="WaDaBa root (category directories or the original flat files)")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--modes", nargs="+", default=["siamese", "triplet"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--split", action="store_true", help="hold out 25%% for evaluation instead of using the whole database")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args.data)
    train_ds, eval_ds = split(dataset, 0.25, args.seed) if args.split else (dataset, dataset)
    print(f"{len(dataset)} images: {dict((c.label, n) for c, n in dataset.counts().items())}")

    for mode in args.modes:
        cfg = TrainConfig(mode=mode, seed=args.seed)
        with open(out / f"{mode}_history.jsonl", "w") as hist:
            params, history = train(train_ds, cfg, BackboneConfig(), progress=hist)
        save_checkpoint(out / f"{mode}.osck", Checkpoint(params, mode, args.seed, len(history)))
        print(eval_one_shot(params, mode, eval_ds, seed=args.seed).render(mode))
        index = build_index(params, eval_ds, mode)
        save_embeddings(out / f"{mode}.osem", index)
        for k in (3, 5, 7):
            report = eval_knn(index, k)
            (out / f"{mode}_knn{k}.json").write_text(report.to_json())
            sys.stdout.write(report.render(mode))


if __name__ == "__main__":
    main()
