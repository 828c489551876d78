"""Operator entry point.

Commands: generate | distill-labels | train | detect | eval | ablate.
Exit codes: 0 success, 2 missing/unwritable/malformed files, 3 diverged
training. Every command writes a config snapshot next to its outputs. The
QC_THREADS environment variable caps ablation parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as D
from .config import (ModelConfig, NoiseConfig, TrainConfig, config_to_dict,
                     model_config_from_dict, train_config_from_dict,
                     write_config_snapshot)
from .detector import HOIModel, detect, read_predictions, write_predictions
from .errors import ParseError, ValidationError
from .evaluation import evaluate, write_report
from .experiments import ExperimentData, run_ablation
from .textbank import TEMPLATES, build_dictionary, read_vocab, write_vocab
from .training import (SceneCache, TrainingDiverged, load_checkpoint,
                       evaluate_model, train)
from . import tensor as tt

TEXT_SEED = 314159
RARE_HEADER = "# hoikit-rare v1"


def _load_config_file(path):
    if not path:
        return {}, {}
    with open(path) as f:
        payload = json.load(f)
    return payload.get("model", {}), payload.get("train", {})


def _model_config(args) -> ModelConfig:
    model_d, _ = _load_config_file(args.config)
    cfg = model_config_from_dict(model_d)
    overrides = {}
    for flag, field_name in (("seed", "seed"), ("lambda1", "lambda1"),
                             ("lambda2", "lambda2"), ("gamma1", "gamma1"),
                             ("gamma2", "gamma2")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if getattr(args, "no_actor", False):
        overrides["use_action_queries"] = False
    if getattr(args, "no_pdqd", False):
        overrides["use_object_tokens"] = False
    return replace(cfg, **overrides)


def _train_config(args) -> TrainConfig:
    _, train_d = _load_config_file(args.config)
    cfg = train_config_from_dict(train_d)
    overrides = {}
    for flag in ("epochs", "lr", "batch_size", "patience", "template", "tau"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if overrides.get("template") and overrides["template"] not in TEMPLATES:
        raise ValidationError(f"unknown template {overrides['template']!r}")
    return replace(cfg, **overrides)


def write_rare_manifest(path, counts, vocab, threshold=10) -> None:
    with open(path, "w") as f:
        f.write(RARE_HEADER + "\n")
        for v, verb in enumerate(vocab.verbs):
            for o, obj in enumerate(vocab.objects):
                rare = int(counts[v, o] < threshold)
                f.write(f"{verb}\t{obj}\t{int(counts[v, o])}\t{rare}\n")


def read_rare_manifest(path, vocab) -> np.ndarray:
    counts = np.zeros((len(vocab.verbs), len(vocab.objects)), dtype=np.int64)
    with open(path) as f:
        first = f.readline().rstrip("\n")
        if first != RARE_HEADER:
            raise ParseError(f"bad manifest header {first!r}", 1)
        for ln, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError("manifest row needs 4 fields", ln)
            verb, obj, count, _ = parts
            counts[vocab.verbs.index(verb), vocab.objects.index(obj)] = int(count)
    return counts


def _load_data_dir(path) -> ExperimentData:
    vocab_pairs = read_vocab(os.path.join(path, "vocab.tsv"))
    verbs = tuple(dict.fromkeys(v for v, _ in vocab_pairs))
    objects = tuple(dict.fromkeys(o for _, o in vocab_pairs))
    vocab = D.VocabSpec(verbs, objects)
    train_scenes = D.read_dataset(os.path.join(path, "train.tsv"))
    val_scenes = D.read_dataset(os.path.join(path, "val.tsv"))
    test_scenes = D.read_dataset(os.path.join(path, "test.tsv"))
    counts = read_rare_manifest(os.path.join(path, "rare_manifest.tsv"), vocab)
    return ExperimentData(vocab, train_scenes, val_scenes, test_scenes, counts)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    vocab = D.VocabSpec()
    seed = args.seed if args.seed is not None else 0
    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
        train_scenes = D.build_corpus(seed, args.train_scenes, vocab,
                                      prefix="train")
        val_scenes = D.build_corpus(seed + 71_000_000, args.val_scenes, vocab,
                                    prefix="val")
        test_scenes = D.build_corpus(seed + 142_000_000, args.test_scenes,
                                     vocab, prefix="test")
        D.write_dataset(os.path.join(out, "train.tsv"), train_scenes)
        D.write_dataset(os.path.join(out, "val.tsv"), val_scenes)
        D.write_dataset(os.path.join(out, "test.tsv"), test_scenes)
        write_vocab(os.path.join(out, "vocab.tsv"), vocab.categories)
        counts = D.category_counts(train_scenes, vocab)
        write_rare_manifest(os.path.join(out, "rare_manifest.tsv"), counts,
                            vocab, args.rare_threshold)
        write_config_snapshot(os.path.join(out, "config.json"),
                              command="generate", seed=seed,
                              sizes={"train": args.train_scenes,
                                     "val": args.val_scenes,
                                     "test": args.test_scenes})
    except OSError as exc:
        print(f"error: cannot write dataset: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(train_scenes)}/{len(val_scenes)}/{len(test_scenes)} "
          f"scenes to {out}")
    return 0


def cmd_distill_labels(args) -> int:
    try:
        scenes = D.read_dataset(args.dataset)
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    noise = NoiseConfig(drop_prob=args.drop_prob, conf_base=args.conf_base,
                        conf_jitter=args.conf_jitter)
    from .object_queries import make_pseudo_labels
    n_classes = len(D.VocabSpec().objects)
    try:
        with open(args.out, "w") as f:
            for s in scenes:
                labels = make_pseudo_labels(D.oracle_detect(s, noise),
                                            n_classes, args.tau)
                present = ",".join(str(i) for i in np.flatnonzero(labels.y))
                f.write(f"{s.image_id}\t{present}\n")
        write_config_snapshot(args.out + ".config.json",
                              command="distill-labels", tau=args.tau,
                              noise=noise)
    except OSError as exc:
        print(f"error: cannot write labels: {exc}", file=sys.stderr)
        return 2
    print(f"wrote pseudo-labels for {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    try:
        data = _load_data_dir(args.data)
    except (OSError, ParseError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return 2
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.tsv")
    checkpoint_path = os.path.join(args.out, "checkpoint.npz")
    write_config_snapshot(os.path.join(args.out, "config.json"),
                          command="train", model=model_cfg, train=train_cfg)
    tdict = None
    if model_cfg.use_action_queries:
        tdict = build_dictionary(data.vocab.categories,
                                 TEMPLATES[train_cfg.template],
                                 model_cfg.text_dim, TEXT_SEED)
    model = HOIModel(model_cfg)
    try:
        result = train(model, data.train_scenes, data.val_scenes, tdict,
                       data.vocab, train_cfg, metrics_path=metrics_path,
                       checkpoint_path=checkpoint_path,
                       resume_from=args.resume, quiet=False)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    print(f"best val mAP {result.best_map_full:.4f} at epoch "
          f"{result.best_epoch}; convergence epoch {result.convergence_epoch}")
    print(f"checkpoint: {checkpoint_path}")
    return 0


def cmd_detect(args) -> int:
    try:
        data = _load_data_dir(args.data)
    except (OSError, ParseError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return 2
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    model = HOIModel(model_cfg)
    try:
        load_checkpoint(args.checkpoint, model)
    except (OSError, KeyError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return 2
    tdict = None
    if model_cfg.use_action_queries:
        tdict = build_dictionary(data.vocab.categories,
                                 TEMPLATES[train_cfg.template],
                                 model_cfg.text_dim, TEXT_SEED)
    split = {"train": data.train_scenes, "val": data.val_scenes,
             "test": data.test_scenes}[args.split]
    cache = SceneCache.build(split, model_cfg, train_cfg)
    preds = {}
    with tt.no_grad():
        for i, scene in enumerate(split):
            preds[scene.image_id] = detect(None, model, tdict,
                                           patches=cache.patches[i])
    try:
        write_predictions(args.out, preds)
        write_config_snapshot(args.out + ".config.json", command="detect",
                              model=model_cfg, split=args.split)
    except OSError as exc:
        print(f"error: cannot write predictions: {exc}", file=sys.stderr)
        return 2
    print(f"wrote predictions for {len(preds)} images to {args.out}")
    return 0


def cmd_eval(args) -> int:
    try:
        data = _load_data_dir(args.data)
        preds = read_predictions(args.predictions)
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    split = {"train": data.train_scenes, "val": data.val_scenes,
             "test": data.test_scenes}[args.split]
    try:
        report = evaluate(preds, split, data.train_counts, data.vocab,
                          rare_threshold=args.rare_threshold)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        write_report(args.out, report, data.vocab)
        write_config_snapshot(args.out + ".config.json", command="eval",
                              predictions=args.predictions, split=args.split)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return 2
    print(f"mAP full {report.map_full:.4f} rare {report.map_rare:.4f} "
          f"non-rare {report.map_nonrare:.4f} ({report.n_categories} "
          f"categories, {report.n_gt} ground truths)")
    print(f"report: {args.out}")
    return 0


def cmd_ablate(args) -> int:
    try:
        data = _load_data_dir(args.data)
    except (OSError, ParseError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return 2
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    rows = run_ablation(args.grid, model_cfg, train_cfg, data)
    os.makedirs(args.out, exist_ok=True)
    table = os.path.join(args.out, f"ablation_{args.grid}.tsv")
    with open(table, "w") as f:
        f.write("# hoikit-ablation v1\n")
        f.write("cell\tmap_full\tmap_rare\tmap_nonrare\tconvergence_epoch\n")
        for row in rows:
            f.write(f"{row.cell}\t{row.map_full!r}\t{row.map_rare!r}\t"
                    f"{row.map_nonrare!r}\t{row.convergence_epoch}\n")
    write_config_snapshot(os.path.join(args.out, f"ablation_{args.grid}.config.json"),
                          command="ablate", grid=args.grid, model=model_cfg,
                          train=train_cfg)
    for row in rows:
        print(f"{row.cell}: full {row.map_full:.4f} rare {row.map_rare:.4f} "
              f"nonrare {row.map_nonrare:.4f} conv {row.convergence_epoch}")
    print(f"table: {table}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--gamma1", type=float, default=None)
    p.add_argument("--gamma2", type=float, default=None)
    p.add_argument("--template", default=None, choices=sorted(TEMPLATES))
    p.add_argument("--no-actor", action="store_true",
                   help="disable the action-query branch")
    p.add_argument("--no-pdqd", action="store_true",
                   help="disable the distilled object-token branch")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hoikit",
        description="Synthetic-benchmark HOI detection with semantic query "
                    "initialization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/val/test corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--train-scenes", type=int, default=2000)
    p.add_argument("--val-scenes", type=int, default=250)
    p.add_argument("--test-scenes", type=int, default=600)
    p.add_argument("--rare-threshold", type=int, default=10)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("distill-labels",
                       help="cache per-image pseudo-labels from the stand-in "
                            "detector")
    p.add_argument("--dataset", required=True, help="scene corpus file")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--drop-prob", type=float, default=0.0)
    p.add_argument("--conf-base", type=float, default=0.9)
    p.add_argument("--conf-jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_distill_labels)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run inference with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="predictions file")
    _add_model_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score a predictions file")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--rare-threshold", type=int, default=10)
    p.add_argument("--out", required=True, help="report file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score one ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True,
                   choices=("modules", "lambda", "gamma", "templates"))
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
