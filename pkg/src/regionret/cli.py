"""Command-line pipeline driver.

Subcommands: gen-data, train, embed, build-index, query, eval, sim-matrix.
Exit codes: 0 success, 2 usage error, 3 I/O failure, 4 validation failure.
Every command is deterministic given its flags; all randomness flows from
--seed.  REGIONMIR_THREADS optionally caps the numeric worker thread count.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import retrieval as rt
from . import trainer as tr
from .errors import (ConfigValidationError, DatasetError, FormatError,
                     InsufficientDataError, MalformedImageError,
                     MissingFileError, ParameterError, RegionRetError,
                     ShapeConsistencyError, UnknownAnatomyError, VersionError)
from .numerics import make_rng

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4

_IO_ERRORS = (MissingFileError, MalformedImageError, FormatError, VersionError,
              FileNotFoundError, IsADirectoryError, PermissionError)


def _apply_thread_cap() -> None:
    cap = os.environ.get("REGIONMIR_THREADS")
    if not cap:
        return
    try:
        limit = int(cap)
    except ValueError:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=limit)
    except ImportError:
        pass


def _parse_box(text: str) -> ds.BoundingBox:
    parts = text.split(",")
    if len(parts) != 5:
        raise ParameterError(f"--box expects label,x0,y0,x1,y1, got {text!r}")
    try:
        label, x0, y0, x1, y1 = (int(p) for p in parts)
    except ValueError as exc:
        raise ParameterError(f"--box fields must be integers: {text!r}") from exc
    return ds.BoundingBox(label, x0, y0, x1, y1)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"{what} not found: {p}")
    return p


# Commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = ds.gen_synthetic(make_rng(args.seed), args.n, args.classes,
                                (args.size, args.size))
    ds.save_dataset(manifest, args.out)
    print(f"wrote {len(manifest.samples)} images, {manifest.num_classes} classes, "
          f"{manifest.image_size[0]}x{manifest.image_size[1]} to {args.out}")
    return EXIT_OK


def _train_config(args) -> tr.TrainConfig:
    kwargs = dict(stage=args.stage, epochs=args.epochs, batch_size=args.batch_size,
                  weight_decay=args.weight_decay, tau=args.tau,
                  lambda_cotrain=args.lambda_cotrain,
                  image_size=(args.image_size, args.image_size), seed=args.seed,
                  clusters_per_anatomy=args.clusters,
                  positive_mode=args.positive_mode)
    if args.lr is not None:
        kwargs["lr"] = args.lr
    return tr.TrainConfig(**kwargs)


def cmd_train(args) -> int:
    manifest = ds.load_dataset(_require(args.data, "dataset"))
    config = _train_config(args)
    config.validate()
    init = None
    if args.init:
        init = tr.load_checkpoint(_require(args.init, "initial checkpoint"))
    ckpt = tr.run_training(config, manifest, init)
    tr.save_checkpoint(ckpt, args.out)
    log_path = args.log or (str(args.out) + ".log")
    with open(log_path, "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(ckpt.loss_history, start=1):
            fh.write(f"{epoch}\t{loss:.10f}\n")
    print(f"stage={config.stage} epochs={config.epochs} "
          f"final_loss={ckpt.loss_history[-1]:.6f} checkpoint={args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = tr.load_checkpoint(_require(args.ckpt, "checkpoint"))
    manifest = ds.load_dataset(_require(args.data, "dataset"))
    db = rt.build_db(ckpt, manifest)
    rt.save_db(db, args.out)
    print(f"wrote {len(db.records)} region embeddings (d={db.dim}) to {args.out}")
    return EXIT_OK


def cmd_build_index(args) -> int:
    db = rt.load_db(_require(args.db, "embedding database"))
    index = rt.build_index(db, args.clusters, make_rng(args.seed))
    rt.save_index(index, args.out)
    reduced = [lab for lab, m in index.models.items() if m.reduced]
    if reduced:
        print(f"warning: cluster count reduced for labels {reduced}", file=sys.stderr)
    print(f"indexed {len(index.models)} anatomies "
          f"(K={args.clusters}) into {args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    ckpt = tr.load_checkpoint(_require(args.ckpt, "checkpoint"))
    db = rt.load_db(_require(args.db, "embedding database"))
    box = _parse_box(args.box)
    pixels = ds.read_pgm(_require(args.image, "query image"))
    image = ds.AnnotatedImage(id=Path(args.image).stem, pixels=pixels, boxes=[box])
    if args.brute_force:
        restrict = box.label if args.label_source == "given" else None
        result = rt.query_bruteforce(db, ckpt, image, box, args.k,
                                     restrict_label=restrict)
    else:
        index = rt.load_index(_require(args.index, "index"))
        result = rt.query_hierarchical(index, db, ckpt, image, box, args.k,
                                       label_source=args.label_source)
    for rank, (image_id, sim, label) in enumerate(result.hits, start=1):
        print(f"{rank}\t{image_id}\t{label}\t{sim:.6f}")
    print(f"candidates={result.candidates_evaluated}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = ds.load_dataset(_require(args.data, "dataset"))
    if args.folds:
        return _eval_folds(args, manifest)
    ckpt = tr.load_checkpoint(_require(args.ckpt, "checkpoint"))
    acc, confusion = tr.eval_classification(ckpt, manifest)
    print(f"accuracy={acc:.6f}")
    for row in confusion:
        print("\t".join(str(int(v)) for v in row))
    return EXIT_OK


def _eval_folds(args, manifest) -> int:
    folds = ds.split_folds(manifest, args.folds, make_rng(args.seed))
    accs = []
    for f, (train_idx, test_idx) in enumerate(folds):
        sub = ds.DatasetManifest(num_classes=manifest.num_classes,
                                 class_names=manifest.class_names,
                                 image_size=manifest.image_size,
                                 samples=[manifest.samples[i] for i in train_idx])
        config = _train_config(args)
        config.validate()
        ckpt = tr.run_training(config, sub)
        acc, _ = tr.eval_classification(ckpt, manifest, indices=test_idx)
        accs.append(acc)
        print(f"fold {f}: accuracy={acc:.6f}")
    print(f"mean accuracy={float(np.mean(accs)):.6f}")
    return EXIT_OK


def cmd_sim_matrix(args) -> int:
    db = rt.load_db(_require(args.db, "embedding database"))
    if args.data:
        manifest = ds.load_dataset(_require(args.data, "dataset"))
        names = manifest.class_names
        num_classes = manifest.num_classes
    else:
        num_classes = max(r.label for r in db.records) + 1
        names = [f"class{i}" for i in range(num_classes)]
    vecs = np.stack([r.vec for r in db.records]).astype(np.float64)
    labels = [r.label for r in db.records]
    mat = rt.similarity_matrix(vecs, labels, num_classes)
    lines = ["," + ",".join(names)]
    for i, name in enumerate(names):
        cells = ["" if np.isnan(v) else f"{v:.6f}" for v in mat[i]]
        lines.append(name + "," + ",".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote similarity matrix to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# Parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionret",
        description="Region embedding training and anatomy-partitioned retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--stage", choices=tr.STAGES, default="pretrain")
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--weight-decay", type=float, default=1e-4)
        p.add_argument("--tau", type=float, default=0.1)
        p.add_argument("--lambda", dest="lambda_cotrain", type=float, default=1.0)
        p.add_argument("--image-size", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--clusters", type=int, default=4)
        p.add_argument("--positive-mode", choices=("all_pairs", "paired"),
                       default="all_pairs")

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="initial checkpoint (finetune)")
    p.add_argument("--log", default=None, help="loss log path (default <out>.log)")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="build the embedding database")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("build-index", help="fit per-anatomy K-means models")
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="retrieve top-k similar regions")
    p.add_argument("--index", default=None)
    p.add_argument("--db", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="query PGM file")
    p.add_argument("--box", required=True, help="label,x0,y0,x1,y1")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--brute-force", action="store_true")
    p.add_argument("--label-source", choices=("classifier", "given"),
                   default="classifier")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="classification evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--folds", type=int, default=None)
    add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sim-matrix", help="between-anatomy similarity matrix as CSV")
    p.add_argument("--db", required=True)
    p.add_argument("--data", default=None, help="dataset for class-name headers")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sim_matrix)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "query" and not args.brute_force and not args.index:
        parser.error("query needs --index unless --brute-force is given")
    if args.command == "eval" and not args.folds and not args.ckpt:
        parser.error("eval needs --ckpt unless --folds is given")
    try:
        return args.func(args)
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigValidationError, ParameterError, InsufficientDataError,
            UnknownAnatomyError, ShapeConsistencyError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RegionRetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
