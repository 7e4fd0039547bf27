"""Command-line pipeline: synth, split, embed, mine-pairs, train, build-trials, evaluate.

Every subcommand accepts ``--config`` (JSON with optional sections
``synth``, ``encoder``, ``head``, ``mining``, ``train``, ``eval`` and a
top-level ``seed``), ``--seed``, ``--threads`` and ``--out``. Command-line
flags override config-file values, which override built-in defaults.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, derive_seed, load_config
from .dataio import (Manifest, attach_labels, encoder_embed, load_images, load_manifest, raw_embed,
                     read_labels, split_disjoint, synth_generate)
from .embeddings import normalize_rows, read_store, write_store
from .encoder import encoder_forward, params_init, params_load, params_save
from .evaluation import TrialSet, build_trials, evaluate
from .mining import mine, read_pairset
from .siamese import ScoredTrial, verification_score, write_scores
from .trainer import ImageBank, train_baseline, train_siamese


class CLIError(Exception):
    pass


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--out", type=Path, required=True, help=out_help)


def _overrides(args, mapping: dict) -> dict:
    """Collect non-None CLI values into a config-override dict."""
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.setdefault(section, {})[key] = value
    return out


ENCODER_FLAGS = {"input_size": ("encoder", "input_height"), "channels": ("encoder", "input_channels"),
                 "block_channels": ("encoder", "block_channels"), "fc1_units": ("encoder", "fc1_units"),
                 "dim": ("encoder", "embedding_dim"), "hidden_units": ("head", "hidden_units")}


def _add_encoder_flags(p):
    p.add_argument("--input-size", dest="input_size", type=int, help="square encoder input size")
    p.add_argument("--channels", type=int)
    p.add_argument("--block-channels", dest="block_channels", type=int, nargs=3)
    p.add_argument("--fc1-units", dest="fc1_units", type=int)
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--hidden-units", dest="hidden_units", type=int)


def _config(args, mapping: dict) -> RunConfig:
    over = _overrides(args, mapping)
    if "encoder" in over and "input_height" in over["encoder"]:
        over["encoder"]["input_width"] = over["encoder"]["input_height"]
    return load_config(args.config, over).seeded()


def _load_manifests(paths) -> Manifest:
    """Merge manifests into one whose record paths are absolute."""
    merged = Manifest(root=Path("/"))
    for path in paths:
        m = load_manifest(path)
        merged.records += [replace(r, path=str((m.root / r.path).resolve())) for r in m.records]
    if len(set(merged.ids)) != len(merged):
        raise CLIError("manifests share image ids")
    return merged


# --- subcommands ------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = _config(args, {"identities": ("synth", "num_identities"),
                         "per_identity": ("synth", "images_per_identity"),
                         "image_size": ("synth", "image_size"), "separation": ("synth", "separation"),
                         "noise": ("synth", "noise"), "img_channels": ("synth", "channels"),
                         "prefix": ("synth", "id_prefix")})
    manifest, labels = synth_generate(cfg.synth, args.out)
    print(f"wrote {cfg.synth.num_identities * cfg.synth.images_per_identity} images, {manifest}, {labels}")


def cmd_split(args) -> None:
    cfg = _config(args, {})
    manifest = attach_labels(load_manifest(args.manifest), read_labels(args.labels))
    a, b = split_disjoint(manifest, args.fraction, derive_seed(cfg.seed, "split"))
    args.out.mkdir(parents=True, exist_ok=True)
    a.write(args.out / "a.txt")
    b.write(args.out / "b.txt")
    print(f"split {len(manifest)} images into {len(a)} (a.txt) and {len(b)} (b.txt)")


def cmd_embed(args) -> None:
    cfg = _config(args, ENCODER_FLAGS)
    manifest = load_manifest(args.manifest)
    if args.raw:
        store = raw_embed(manifest, cfg.encoder.embedding_dim, derive_seed(cfg.seed, "projection"),
                          args.thumb, cfg.encoder.input_channels)
    else:
        params = params_load(args.params) if args.params else params_init(cfg.encoder)
        store = encoder_embed(manifest, params)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_store(store, args.out)
    print(f"wrote {len(store)} x {store.dim} embeddings ({store.source}) to {args.out}")


MINING_FLAGS = {"k": ("mining", "k"), "pos_threshold": ("mining", "pos_threshold"),
                "neg_threshold": ("mining", "neg_threshold"), "pos_mode": ("mining", "pos_mode"),
                "neg_mode": ("mining", "neg_mode"), "bidirectional": ("mining", "bidirectional")}


def cmd_mine(args) -> None:
    cfg = _config(args, MINING_FLAGS)
    X, Y = read_store(args.x), read_store(args.y)
    pairs = mine(X, Y, cfg.mining)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    pairs.write(args.out)
    print(f"wrote {len(pairs.positives)} positive and {len(pairs.negatives)} negative pairs to {args.out}")


TRAIN_FLAGS = {"epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"),
               "lr_start": ("train", "lr_start"), "lr_end": ("train", "lr_end"),
               "momentum": ("train", "momentum"), "weight_decay": ("train", "weight_decay"),
               "patience": ("train", "early_stop_patience"), "optimizer": ("train", "optimizer"),
               **ENCODER_FLAGS}


def cmd_train(args) -> None:
    cfg = _config(args, TRAIN_FLAGS)
    if args.baseline and not args.labels:
        raise CLIError("--baseline needs --labels")
    if not args.baseline and not args.pairs:
        raise CLIError("--pairs is required unless --baseline is given")
    manifest = _load_manifests(args.manifest)
    pairs = read_pairset(args.pairs) if not args.baseline else None
    enc = cfg.encoder
    images = load_images(manifest, enc.input_height, enc.input_width, enc.input_channels)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.baseline:
        labels = read_labels(args.labels)
        missing = [i for i in manifest.ids if i not in labels]
        if missing:
            raise CLIError(f"{len(missing)} images have no label, e.g. {missing[0]}")
        params, log, _ = train_baseline(images, [labels[i] for i in manifest.ids], cfg.train, enc)
    else:
        bank = ImageBank(manifest.ids, images)
        params, log = train_siamese(pairs, bank, cfg.train, enc, cfg.head)
    params_save(params, args.out / "checkpoint.snw")
    (args.out / "train_log.jsonl").write_text(log.to_ndjson(), encoding="utf-8")
    (args.out / "summary.txt").write_text(log.summary() + "\n", encoding="utf-8")
    print(log.summary())


def cmd_build_trials(args) -> None:
    cfg = _config(args, {"folds": ("eval", "folds"), "matched": ("eval", "matched_per_fold"),
                         "mismatched": ("eval", "mismatched_per_fold")})
    trials = build_trials(read_labels(args.labels), cfg.eval.folds, cfg.eval.matched_per_fold,
                          cfg.eval.mismatched_per_fold, derive_seed(cfg.seed, "trials"))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    trials.write(args.out)
    print(f"wrote {len(trials)} trials in {trials.num_folds} folds to {args.out}")


def cmd_evaluate(args) -> None:
    if not args.checkpoint.is_file():
        raise CLIError(f"checkpoint not found: {args.checkpoint}")
    params = params_load(args.checkpoint)
    trials = TrialSet.read(args.trials)
    manifest = _load_manifests(args.manifest)
    enc = params.encoder
    bank = ImageBank(manifest.ids, load_images(manifest, enc.input_height, enc.input_width, enc.input_channels))
    a = bank.images[bank.lookup([t.id_a for t in trials.trials])]
    b = bank.images[bank.lookup([t.id_b for t in trials.trials])]
    if params.head is not None and params.head.kind == "siamese":
        scores = verification_score(params, a, b)
    else:
        ea, eb = normalize_rows(encoder_forward(params, a)), normalize_rows(encoder_forward(params, b))
        scores = np.einsum("ij,ij->i", ea, eb)
    report = evaluate(scores, trials)
    report.write(args.out)
    write_scores([ScoredTrial(t.id_a, t.id_b, float(s), t.label) for t, s in zip(trials.trials, scores)],
                 args.out / "scores.csv")
    sys.stdout.write(report.to_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamverify", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    _common(p, "output directory")
    p.add_argument("--identities", type=int)
    p.add_argument("--per-identity", dest="per_identity", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--img-channels", dest="img_channels", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--prefix", help="id prefix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="identity-disjoint A/B split of a labelled manifest")
    _common(p, "output directory for a.txt and b.txt")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("embed", help="write an EMB1 embedding file for a manifest")
    _common(p, "embedding file")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--params", type=Path, help="SNW1 checkpoint (default: seeded random-init encoder)")
    p.add_argument("--raw", action="store_true", help="raw-pixel thumbnails + random projection")
    p.add_argument("--thumb", type=int, default=8, help="thumbnail size for --raw")
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("mine-pairs", help="mine positive/negative training pairs")
    _common(p, "pair-set file")
    p.add_argument("--x", type=Path, required=True, help="anchor embedding file")
    p.add_argument("--y", type=Path, required=True, help="identity-disjoint embedding file")
    p.add_argument("--k", type=int)
    p.add_argument("--pos-threshold", dest="pos_threshold", type=float)
    p.add_argument("--neg-threshold", dest="neg_threshold", type=float)
    p.add_argument("--pos-mode", dest="pos_mode", choices=("below", "above"))
    p.add_argument("--neg-mode", dest="neg_mode", choices=("below", "above"))
    p.add_argument("--bidirectional", action="store_true", default=None)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train the siamese network (or the supervised baseline)")
    _common(p, "output directory")
    p.add_argument("--pairs", type=Path)
    p.add_argument("--manifest", type=Path, action="append", required=True)
    p.add_argument("--baseline", action="store_true", help="supervised identity classifier")
    p.add_argument("--labels", type=Path, help="label sidecar (baseline only)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-start", dest="lr_start", type=float)
    p.add_argument("--lr-end", dest="lr_end", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-trials", help="sample a k-fold verification protocol")
    _common(p, "trials file")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--matched", type=int)
    p.add_argument("--mismatched", type=int)
    p.set_defaults(func=cmd_build_trials)

    p = sub.add_parser("evaluate", help="score trials and write EER / k-fold accuracy reports")
    _common(p, "report directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--trials", type=Path, required=True)
    p.add_argument("--manifest", type=Path, action="append", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limit:
            args.func(args)
    except (CLIError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"siamverify {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
