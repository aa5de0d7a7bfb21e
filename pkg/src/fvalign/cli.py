"""Command-line entry point: ``fvalign <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 invalid or missing input data,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import DataError, NumericError, ShapeError
from .io import json_text, load_config
from .prior import PRIOR_KINDS
from .synthetic import make_fixture

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _context(args):
    cfg = load_config(args.config)
    base = Path(args.config).parent if args.config else Path(".")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workdir is not None:
        cfg.workdir = str(Path(args.workdir).resolve())
    return cfg, base


def _pipeline_context(args):
    cfg, base = _context(args)
    manifest, paths = pipeline.load_run(cfg, base)
    return cfg, manifest, paths


def cmd_features(args):
    cfg, manifest, paths = _pipeline_context(args)
    written = pipeline.run_features(cfg, manifest, paths)
    print(f"wrote {len(written)} mel containers to {paths.mels}")


def cmd_train_se(args):
    cfg, manifest, paths = _pipeline_context(args)
    pipeline.run_train_se(cfg, manifest, paths)
    print(f"wrote {paths.se} and {paths.se_loss}")


def cmd_embed_speech(args):
    cfg, manifest, paths = _pipeline_context(args)
    out = args.out or paths.speech
    c = pipeline.run_embed_speech(cfg, manifest, paths, checkpoint=args.checkpoint, out=out)
    print(f"wrote {len(c.metadata['item_ids'])} speech embeddings to {out}")


def cmd_compute_prior(args):
    cfg, base = _context(args)
    paths = pipeline.Paths(base / cfg.workdir)
    kind = args.kind or cfg.prior_kind
    n = args.n if args.n is not None else cfg.prior_n
    out = args.out or paths.prior
    split = None if args.split == "all" else args.split
    prior = pipeline.run_compute_prior(args.embeddings or paths.speech, kind, n, out, split)
    print(f"wrote {prior.kind} prior (n_sources={prior.n_sources}) to {out}")


def cmd_train_fe(args):
    cfg, manifest, paths = _pipeline_context(args)
    if args.loss_variant:
        cfg.loss_variant = args.loss_variant
    if args.compare_variants:
        cfg.compare_variants = True
    pipeline.run_train_fe(cfg, manifest, paths, speech=args.speech, prior_path=args.prior)
    print(f"wrote {paths.fe}, {paths.fe_loss} and {paths.fe_metrics}")


def cmd_eval(args):
    report = pipeline.run_eval(args.reference, args.candidate, args.out, args.pair_by)
    print(json_text(report), end="")


def cmd_project(args):
    summary = pipeline.run_project(args.embeddings, args.out_csv, args.out_svg)
    print(f"silhouette={summary['silhouette']:.4f}")


def cmd_export_conditioning(args):
    cfg, manifest, paths = _pipeline_context(args)
    out = args.out or paths.conditioning
    split = None if args.split == "all" else args.split
    c = pipeline.run_export_conditioning(cfg, manifest, paths, checkpoint=args.checkpoint,
                                         prior_path=args.prior, out=out,
                                         face_out=args.face_out, split=split)
    print(f"wrote {len(c.metadata['item_ids'])} conditioning vectors to {out}")


def cmd_make_fixture(args):
    root = make_fixture(args.directory, n_speakers=args.speakers, seed=args.seed or 0)
    print(f"wrote fixture to {root}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fvalign", description="Face-to-voice embedding alignment pipeline.")
    parser.add_argument("--config", help="JSON run configuration (paths resolve relative to it)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--workdir", help="override the configured work directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("features", help="log-mel features for every manifest utterance"
                   ).set_defaults(func=cmd_features)
    sub.add_parser("train-se", help="train the speech encoder with GE2E"
                   ).set_defaults(func=cmd_train_se)

    p = sub.add_parser("embed-speech", help="per-utterance speech embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed_speech)

    p = sub.add_parser("compute-prior", help="neutral or gender prior from speech embeddings")
    p.add_argument("--embeddings")
    p.add_argument("--kind", choices=PRIOR_KINDS)
    p.add_argument("--n", type=int, help="number of source speakers (neutral prior)")
    p.add_argument("--split", default="train", choices=("train", "val", "test", "all"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_compute_prior)

    p = sub.add_parser("train-fe", help="train the face encoder on residual targets")
    p.add_argument("--speech")
    p.add_argument("--prior")
    p.add_argument("--loss-variant", choices=("tri-item", "cosine-only", "L2-only", "cosine+L2"))
    p.add_argument("--compare-variants", action="store_true",
                   help="also train every loss variant and log all curves")
    p.set_defaults(func=cmd_train_fe)

    p = sub.add_parser("eval", help="L1 / L2 / cosine between two embedding sets")
    p.add_argument("--reference", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--pair-by", default="item", choices=("item", "speaker"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="2-D PCA projection with silhouette score")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-svg")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("export-conditioning", help="face embedding plus prior for each image")
    p.add_argument("--checkpoint")
    p.add_argument("--prior")
    p.add_argument("--split", default="all", choices=("train", "val", "test", "all"))
    p.add_argument("--out")
    p.add_argument("--face-out", help="also write the face-only embeddings")
    p.set_defaults(func=cmd_export_conditioning)

    p = sub.add_parser("make-fixture", help="write a small synthetic corpus")
    p.add_argument("directory")
    p.add_argument("--speakers", type=int, default=8)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
