"""Command-line entry point: ``diffvqa <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numeric failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError
from .keyword import keyword_to_target
from .metrics import score_corpus
from .pipeline import ConfigError, evaluate, load_config, load_predictor, run_training
from .registration import AffineParams, fit_affine, warp_main
from .saliency import SaliencyMap, apply_mask, gradcam_batch, shared_mask
from .synthdata import generate_corpus, load_split, read_pgm, write_pgm
from .tensor import NonFiniteError, Tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("diffvqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _image(path) -> np.ndarray:
    return read_pgm(path)[None]


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return tuple(parts)


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synthdata import SynthConfig

    mans = generate_corpus(args.root, args.count, args.seed, SynthConfig(image_size=args.image_size),
                           args.split_ratios)
    for split, man in mans.items():
        print(f"{split}: {man.count} samples")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    run = run_training(cfg)
    print(f"best epoch {run.best.epoch} combined {run.best.score:.4f} -> {run.best_path}")
    print(f"log: {run.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    predictor = load_predictor(args.ckpt)
    root = args.root
    if root is None:
        from .checkpoint import load_checkpoint

        root = load_checkpoint(args.ckpt).meta.get("train_config", {}).get("data_root")
        if root is None:
            raise UsageError("checkpoint carries no data_root; pass --root")
    samples = load_split(root, args.split)
    res = evaluate(predictor, samples)
    _emit(res.summary(), args.json)
    return EXIT_OK


def cmd_infer(args) -> int:
    predictor = load_predictor(args.ckpt)
    main, ref = _image(args.main), _image(args.ref)
    if main.shape != ref.shape:
        raise ValueError(f"image shapes differ: {main.shape} vs {ref.shape}")
    print(predictor.answer(main, ref, args.question, single_pass=args.single_pass))
    return EXIT_OK


def cmd_metrics(args) -> int:
    _emit(score_corpus(args.hyp, args.ref).to_dict(), args.json)
    return EXIT_OK


def cmd_cam(args) -> int:
    """Keyword-conditioned maps for one pair, written as 8-bit PGM files."""
    predictor = load_predictor(args.ckpt)
    model, vocab = predictor.model, predictor.vocab
    main, ref = _image(args.main), _image(args.ref)
    q = vocab.encode(args.question)
    main_reg = predictor._register(main[None], ref[None])
    if args.answer is not None:
        answer_ids = vocab.encode(args.answer)
    else:
        answer_ids = predictor.single_pass(main[None], ref[None], [q])[0]
    target = keyword_to_target(args.keyword, vocab, answer_ids)
    if target is None:
        # keyword absent from the answer: score it as a one-word answer instead
        log.info("keyword %r not in the answer; using it as the answer", args.keyword)
        answer_ids = vocab.encode(args.keyword)
        target = keyword_to_target(args.keyword, vocab, answer_ids)
    m_main, m_ref = gradcam_batch(model, Tensor(main_reg), Tensor(ref[None]), [q], [target])
    s_main, s_ref = SaliencyMap(m_main[0], "main"), SaliencyMap(m_ref[0], "ref")
    s = shared_mask(s_main, s_ref)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "s_main.pgm", s_main.values)
    write_pgm(out / "s_ref.pgm", s_ref.values)
    write_pgm(out / "s_shared.pgm", s.values)
    with T.no_grad():
        write_pgm(out / "main_masked.pgm", apply_mask(Tensor(main_reg[0]), s).data)
        write_pgm(out / "ref_masked.pgm", apply_mask(Tensor(ref), s).data)
    print(f"answer: {vocab.decode(answer_ids)}")
    print(f"wrote 5 PGM files to {out}")
    return EXIT_OK


def cmd_register(args) -> int:
    main, ref = _image(args.main), _image(args.ref)
    if main.shape != ref.shape:
        raise ValueError(f"image shapes differ: {main.shape} vs {ref.shape}")
    if args.ckpt:
        model = load_predictor(args.ckpt).model
        with T.no_grad():
            theta = model.predictor(Tensor(main[None]), Tensor(ref[None])).theta.data[0]
    else:
        theta = fit_affine(main[0], ref[0], steps=args.steps, lr=args.lr)
    with T.no_grad():
        warped = warp_main(Tensor(main[None]), AffineParams(theta[None])).data[0]
    write_pgm(args.out_image, np.clip(warped, 0.0, 1.0))
    T.to_csv(Tensor(theta), args.out_theta)
    print(" ".join(f"{v:.6f}" for v in theta.reshape(-1)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    rows = run_gradient_suite(args.seed)
    for r in rows:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:36s} err={r.error:.3e} tol={r.tol:.0e}")
    failed = [r.name for r in rows if not r.ok]
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffvqa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--root", required=True)
    g.add_argument("--count", type=int, default=2500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--split-ratios", type=_ratios, default=(0.8, 0.1, 0.1),
                   help="train,valid,test fractions (default 0.8,0.1,0.1)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="warm-up then masked training from a config file")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=("train", "valid", "test"))
    e.add_argument("--root", help="dataset root (default: the one the checkpoint was trained on)")
    e.add_argument("--json", help="also write the summary here")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="answer a question about one image pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--main", required=True)
    i.add_argument("--ref", required=True)
    i.add_argument("--question", required=True)
    i.add_argument("--single-pass", action="store_true")
    i.set_defaults(fn=cmd_infer)

    m = sub.add_parser("metrics", help="score hypothesis lines against reference lines")
    m.add_argument("--hyp", required=True)
    m.add_argument("--ref", required=True)
    m.add_argument("--json", help="also write the scores here")
    m.set_defaults(fn=cmd_metrics)

    c = sub.add_parser("cam", help="keyword Grad-CAM heatmaps and masked images")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--main", required=True)
    c.add_argument("--ref", required=True)
    c.add_argument("--question", required=True)
    c.add_argument("--keyword", required=True)
    c.add_argument("--answer", help="answer to condition on (default: the model's own)")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(fn=cmd_cam)

    r = sub.add_parser("register", help="align the main image to the reference")
    r.add_argument("--main", required=True)
    r.add_argument("--ref", required=True)
    r.add_argument("--out-image", required=True)
    r.add_argument("--out-theta", required=True)
    r.add_argument("--ckpt", help="use the trained predictor instead of direct fitting")
    r.add_argument("--steps", type=int, default=300)
    r.add_argument("--lr", type=float, default=0.01)
    r.set_defaults(fn=cmd_register)

    k = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
