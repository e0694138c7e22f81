"""Command-line entry points: train, eval, heatmap, gradcheck, compare.

Everything written to stdout is a function of the flags and seeds, so two
identical invocations print identical text.  Wall-clock times only go to
the ``--log`` file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import PRESETS, DatasetManifest, SyntheticSpec, generate_synthetic, load_dataset, synthetic_spec
from .episodes import SPLITS, DatasetError, SplitDataset, episode_rng, sample_episode
from .gradcheck import check_model, check_op_suite, summarize
from .heatmap import export_heatmap
from .model import BACKBONES, FewShotCosineTransformer, ModelConfig, ModelState
from .tensor import ShapeError
from .training import TrainConfig, TrainingDiverged, aggregated_heatmap, compare_attention, evaluate, train

log = logging.getLogger("fsct")


class UsageError(ValueError):
    pass


def _data_args(p: argparse.ArgumentParser, required: bool) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--dataset", metavar="MANIFEST", help="JSON dataset manifest")
    g.add_argument("--synthetic-spec", metavar="SPEC",
                   help=f"synthetic preset ({', '.join(PRESETS)}) or JSON file of generator fields")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--queries-per-class", type=int, default=16)
    p.add_argument("--attention", choices=("cosine", "softmax"), default="cosine")
    p.add_argument("--prototype", choices=("learnable", "uniform"), default="learnable")
    p.add_argument("--backbone", choices=BACKBONES, default=None,
                   help="default: identity for feature vectors, conv4 for images")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--d-head", type=int, default=None)
    p.add_argument("--hidden-channels", type=int, default=64)
    p.add_argument("--norm", choices=("pre", "post"), default="pre")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--episodes-per-epoch", type=int, default=50)
    p.add_argument("--val-episodes", type=int, default=None, help="default: episodes per epoch")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--augment-flip", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsct", description="Few-shot cosine transformer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic training with best-validation selection")
    _data_args(p, required=True)
    _model_args(p)
    _train_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="CHECKPOINT")
    p.add_argument("--log", metavar="JSONL", help="per-epoch records, one JSON object per line")

    p = sub.add_parser("eval", help="mean test accuracy with a 95%% interval")
    p.add_argument("--checkpoint", required=True)
    _data_args(p, required=False)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("heatmap", help="export query/prototype attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    _data_args(p, required=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=1, help="episodes averaged into the aggregated matrix")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--out", default="heatmap", metavar="PREFIX")
    p.add_argument("--no-orient", action="store_true", help="average raw head maps without sign orientation")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=10, help="probes per parameter group")

    p = sub.add_parser("compare", help="cosine versus softmax attention on paired seeds")
    _data_args(p, required=True)
    _model_args(p)
    _train_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--test-episodes", type=int, default=100)
    return parser


def resolve_dataset(args) -> tuple[SplitDataset, dict]:
    """Load the dataset named on the command line and describe its source."""
    if args.synthetic_spec is not None:
        spec = synthetic_spec(args.synthetic_spec)
        return generate_synthetic(spec), {"synthetic": spec.to_dict()}
    path = Path(args.dataset).resolve()
    try:
        manifest = DatasetManifest.from_file(path)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from None
    return load_dataset(manifest), {"manifest": str(path)}


def dataset_for_checkpoint(args, state: ModelState) -> SplitDataset:
    if args.dataset is not None or args.synthetic_spec is not None:
        return resolve_dataset(args)[0]
    source = state.metadata.get("dataset")
    if not source:
        raise UsageError("checkpoint records no dataset; pass --dataset or --synthetic-spec")
    if "synthetic" in source:
        return generate_synthetic(SyntheticSpec(**source["synthetic"]))
    return load_dataset(DatasetManifest.from_file(source["manifest"]))


def model_config(args, dataset: SplitDataset, seed: int) -> ModelConfig:
    shape = dataset.sample_shape
    backbone = args.backbone or ("identity" if len(shape) == 1 else "conv4")
    return ModelConfig(
        n_way=args.ways, k_shot=args.shots, queries_per_class=args.queries_per_class,
        backbone=backbone, input_shape=shape, hidden_channels=args.hidden_channels,
        num_heads=args.heads, d_head=args.d_head, attention=args.attention,
        prototype=args.prototype, norm=args.norm, seed=seed,
    )


def train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, episodes_per_epoch=args.episodes_per_epoch,
                       val_episodes=args.val_episodes, lr=args.lr, weight_decay=args.weight_decay,
                       seed=seed, augment_flip=args.augment_flip)


def cmd_train(args) -> int:
    dataset, source = resolve_dataset(args)
    state = ModelState.create(model_config(args, dataset, args.seed))
    state.metadata["dataset"] = source
    log_fh = open(args.log, "w") if args.log else None

    def on_epoch(rec):
        print(f"epoch {rec.epoch}  loss {rec.train_loss:.6f}  val {rec.val_accuracy:.2f}", flush=True)
        if log_fh is not None:
            log_fh.write(rec.to_json() + "\n")
            log_fh.flush()

    try:
        state, history = train(dataset, train_config(args, args.seed), state, on_epoch=on_epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_checkpoint(args.out, state)
    if history:
        print(f"best val {state.metadata['best_val_accuracy']:.2f}")
    print(f"saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = dataset_for_checkpoint(args, state)
    res = evaluate(dataset.pool(args.split), state, args.episodes, seed=args.seed, workers=args.workers)
    print(f"accuracy {res} ({args.episodes} episodes, {args.split} split)")
    return 0


def cmd_heatmap(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = dataset_for_checkpoint(args, state)
    hm = aggregated_heatmap(dataset.pool(args.split), state, args.episodes, seed=args.seed,
                            orient=not args.no_orient)
    for name, matrix in (("query", hm.per_query), ("aggregated", hm.aggregated)):
        path = export_heatmap(matrix, f"{args.out}_{name}.{args.format}", args.format)
        print(f"wrote {path}")
    hits = int(np.sum(hm.aggregated.argmax(axis=1) == np.arange(len(hm.aggregated))))
    print(f"diagonal row maxima {hits}/{len(hm.aggregated)}")
    return 0


def gradcheck_models(seed: int) -> list:
    """Small model/episode pairs covering a conv backbone and the identity backbone."""
    pairs = []
    for cfg in (
        ModelConfig(n_way=3, k_shot=2, queries_per_class=2, backbone="conv4", input_shape=(3, 16, 16),
                    hidden_channels=8, num_heads=2, seed=seed),
        ModelConfig(n_way=3, k_shot=2, queries_per_class=2, backbone="identity", input_shape=(16,),
                    num_heads=2, seed=seed),
    ):
        rng = episode_rng(seed, 9)
        pool = {f"c{i}": rng.standard_normal((4,) + cfg.input_shape) for i in range(cfg.n_way)}
        episode = sample_episode(pool, cfg.n_way, cfg.k_shot, cfg.queries_per_class, rng)
        pairs.append((f"model[{cfg.backbone}]", FewShotCosineTransformer(cfg), episode))
    return pairs


def cmd_gradcheck(args) -> int:
    probes = check_op_suite(args.seed)
    for label, model, episode in gradcheck_models(args.seed):
        for p in check_model(model, episode, probes_per_group=args.probes, seed=args.seed):
            p.check = label
            probes.append(p)
    failed = 0
    for name, (passed, total, worst) in summarize(probes).items():
        status = "ok" if passed == total else "FAIL"
        failed += total - passed
        print(f"{name:24s} {passed:4d}/{total:<4d} worst rel {worst:.2e}  {status}")
    print("gradcheck passed" if not failed else f"gradcheck FAILED ({failed} probes)")
    return 0 if not failed else 1


def cmd_compare(args) -> int:
    dataset, _ = resolve_dataset(args)
    rows = compare_attention(dataset, model_config(args, dataset, 0), train_config(args, 0),
                             args.seeds, test_episodes=args.test_episodes)
    print(f"{'seed':>6} {'cosine':>8} {'softmax':>8}")
    for r in rows:
        print(f"{r.seed:>6} {r.cosine:8.2f} {r.softmax:8.2f}")
    cos = float(np.mean([r.cosine for r in rows]))
    soft = float(np.mean([r.softmax for r in rows]))
    print(f"{'mean':>6} {cos:8.2f} {soft:8.2f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DatasetError, CheckpointError, ShapeError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"fsct {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
