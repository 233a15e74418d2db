"""Command-line entry point: ``train``, ``eval``, ``export-embeddings``, ``gen-synthetic``.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .backbone import BackboneConfig
from .data import Dataset, gen_synthetic, load_dataset, split, write_synthetic
from .evaluation import EvalReport, build_index, eval_knn, eval_one_shot
from .formats import Checkpoint, FormatError, load_checkpoint, load_embeddings, save_checkpoint, save_embeddings
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    mode: str = "siamese"
    epochs: Optional[int] = None
    instances_per_epoch: int = 5000
    batch_size: int = 32
    lr: float = 0.001
    momentum: float = 0.9
    margin: float = 0.4
    seed: int = 0
    # data
    data: Optional[str] = None
    synthetic: Optional[int] = None  # images per class
    data_seed: int = 0
    backbone: Optional[str] = None  # koch | desk; synthetic runs default to desk
    test_fraction: float = 0.25
    split_seed: int = 0
    subset: Optional[str] = None  # all | train | test
    # evaluation
    protocol: str = "oneshot"
    k: int = 3
    episodes: int = 400
    # files
    checkpoint: Optional[str] = None
    embeddings: Optional[str] = None
    out: Optional[str] = None
    history: Optional[str] = None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            epochs=self.epochs,
            instances_per_epoch=self.instances_per_epoch,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            margin=self.margin,
            seed=self.seed,
        )

    def backbone_config(self) -> BackboneConfig:
        name = self.backbone or ("desk" if self.synthetic is not None else "koch")
        return BackboneConfig.preset(name)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then ``--config`` JSON, then explicit flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.from_json(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"invalid config {args.config}: {exc}") from exc
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name, None) is not None}
    return dataclasses.replace(cfg, **overrides)


def _dataset(cfg: RunConfig, default_subset: str) -> Dataset:
    if cfg.synthetic is not None:
        ds = gen_synthetic(cfg.data_seed, cfg.synthetic)
    elif cfg.data:
        ds = load_dataset(cfg.data)
    else:
        raise ConfigError("give --data <dir> or --synthetic <per-class>")
    subset = cfg.subset or default_subset
    if subset == "all":
        return ds
    if subset not in ("train", "test"):
        raise ConfigError(f"subset must be all, train or test, got {subset!r}")
    train_ds, test_ds = split(ds, cfg.test_fraction, cfg.split_seed)
    return train_ds if subset == "train" else test_ds


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    tcfg = cfg.train_config()
    backbone = cfg.backbone_config()
    dataset = _dataset(cfg, "train")
    history_file = open(cfg.history, "w") if cfg.history else None
    try:
        stream = _Tee(out, history_file) if history_file else out
        try:
            params, history = train(dataset, tcfg, backbone, progress=stream)
        except TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    finally:
        if history_file:
            history_file.close()
    path = cfg.out or "checkpoint.osck"
    save_checkpoint(path, Checkpoint(params, tcfg.mode, tcfg.seed, len(history)))
    print(f"checkpoint written to {path} (sha256 {history.checksum[:16]})", file=sys.stderr)
    return EXIT_OK


class _Tee:
    def __init__(self, *streams):
        self.streams = streams

    def write(self, text):
        for s in self.streams:
            s.write(text)

    def flush(self):
        for s in self.streams:
            s.flush()


def _load_ckpt(cfg: RunConfig, requested_mode: Optional[str]) -> Checkpoint:
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    try:
        ckpt = load_checkpoint(cfg.checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {cfg.checkpoint} not found") from exc
    if requested_mode and requested_mode != ckpt.mode:
        raise ConfigError(f"checkpoint was trained in {ckpt.mode} mode, {requested_mode} requested")
    return ckpt


def cmd_eval(cfg: RunConfig, requested_mode: Optional[str] = None, out=None) -> int:
    out = out or sys.stdout
    if cfg.protocol == "knn":
        if cfg.embeddings:
            index = load_embeddings(cfg.embeddings)
        else:
            ckpt = _load_ckpt(cfg, requested_mode)
            index = build_index(ckpt.params, _dataset(cfg, "all"), ckpt.mode)
        if not 1 <= cfg.k < len(index):
            raise ConfigError(f"k={cfg.k} needs an index with more than k entries (size {len(index)})")
        report = eval_knn(index, cfg.k)
        method = ""
    elif cfg.protocol == "oneshot":
        ckpt = _load_ckpt(cfg, requested_mode)
        report = eval_one_shot(ckpt.params, ckpt.mode, _dataset(cfg, "test"), cfg.episodes, cfg.seed)
        method = ckpt.mode
    else:
        raise ConfigError(f"protocol must be oneshot or knn, got {cfg.protocol!r}")
    Path(cfg.out or "report.json").write_text(report.to_json())
    out.write(report.render(method))
    return EXIT_OK


def cmd_export_embeddings(cfg: RunConfig, requested_mode: Optional[str] = None) -> int:
    ckpt = _load_ckpt(cfg, requested_mode)
    index = build_index(ckpt.params, _dataset(cfg, "all"), ckpt.mode)
    path = cfg.out or "embeddings.osem"
    save_embeddings(path, index)
    print(f"{len(index)} embeddings (dim {index.dim}) written to {path}", file=sys.stderr)
    return EXIT_OK


def cmd_gen_synthetic(per_class: int, seed: int, out_dir: str) -> int:
    written = write_synthetic(out_dir, seed, per_class)
    print(f"{len(written)} images written under {out_dir}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--data", help="dataset root (category directories or WaDaBa files)")
    p.add_argument("--synthetic", type=int, metavar="N", help="use the synthetic dataset, N images per class")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--backbone", choices=["koch", "desk"])
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--subset", choices=["all", "train", "test"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oneshot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a siamese or triplet backbone")
    _common(p)
    p.add_argument("--mode", choices=["siamese", "triplet"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--instances", dest="instances_per_epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--history", help="also write the JSON-lines history here")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("eval", help="1-shot 5-way or KNN evaluation")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["siamese", "triplet"])
    p.add_argument("--protocol", choices=["oneshot", "knn"])
    p.add_argument("--k", type=int, choices=[3, 5, 7])
    p.add_argument("--episodes", type=int)
    p.add_argument("--embeddings", help="evaluate KNN on an exported embedding file")

    p = sub.add_parser("export-embeddings", help="write an OSEM embedding file")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["siamese", "triplet"])

    p = sub.add_parser("gen-synthetic", help="write the synthetic dataset as PNGs")
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args.per_class, args.seed, args.out)
        requested_mode = getattr(args, "mode", None)
        if args.command != "train":
            args.mode = None  # the checkpoint decides; --mode only guards against mismatch
        cfg = resolve_config(args)
        if args.command == "train":
            if args.dry_run:
                resolved = dataclasses.asdict(cfg)
                resolved.update(dataclasses.asdict(cfg.train_config()))
                print(json.dumps(resolved, indent=2, sort_keys=True))
                return EXIT_OK
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, requested_mode)
        return cmd_export_embeddings(cfg, requested_mode)
    except (ConfigError, ValueError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
