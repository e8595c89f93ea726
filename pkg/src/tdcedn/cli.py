"""Command-line entry point: ``tdcedn {train,predict,fuse,eval,gradcheck,inspect}``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Data goes to files
and standard output, diagnostics to standard error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from . import inference as I
from .checkpoint import CheckpointError, read_records
from .evaluation import MatchConfig, emit_pr_csv, evaluate_dir
from .gradcheck import run_suite
from .network import VGG16_WIDTHS, TDCEDN, load_checkpoint
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("tdcedn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _widths(text: str) -> tuple[int, ...]:
    try:
        w = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}") from None
    if len(w) != 5 or min(w) < 1:
        raise argparse.ArgumentTypeError("widths need five positive integers")
    return w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdcedn", description="Top-down contour detection network: train, predict, fuse, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    t = sub.add_parser("train", help="train a network from a manifest")
    t.add_argument("--manifest", required=True, help="dataset manifest")
    t.add_argument("--out-dir", required=True, help="directory for loss_log.csv and checkpoints")
    t.add_argument("--config", help="key = value file of training settings")
    t.add_argument("--consensus", choices=("over3", "all"), help="annotation consensus policy")
    t.add_argument("--size", type=int, help="training input size (square)")
    t.add_argument("--max-iter", type=int, help="number of SGD iterations")
    t.add_argument("--lr", type=float, help="base learning rate")
    t.add_argument("--seed", type=int, help="seed for init, dropout, shuffling and augmentation")
    t.add_argument("--widths", type=_widths, default=VGG16_WIDTHS, help="five encoder stage widths (default VGG-16)")
    t.add_argument("--precision", choices=("f32", "f64"), default="f32", help="floating point precision")
    t.add_argument("--resume", help="checkpoint to resume from (needs its .opt sidecar)")

    pr = sub.add_parser("predict", help="write probability maps for every manifest image")
    pr.add_argument("--checkpoint", required=True, help="trained checkpoint")
    pr.add_argument("--manifest", required=True, help="dataset manifest (ground truth optional)")
    pr.add_argument("--out-dir", required=True, help="directory for <id>.pgm maps")
    pr.add_argument("--border", type=int, default=I.BORDER_PX, help="edge-replicated border in pixels")

    f = sub.add_parser("fuse", help="blend two prediction directories")
    f.add_argument("--a", required=True, help="maps of the over3 model")
    f.add_argument("--b", required=True, help="maps of the all-labels model")
    f.add_argument("--gamma", type=float, default=0.5, help="weight of --a")
    f.add_argument("--out-dir", required=True, help="directory for fused maps")

    e = sub.add_parser("eval", help="boundary benchmark of a prediction directory")
    e.add_argument("--pred-dir", required=True, help="directory of <id>.pgm maps")
    e.add_argument("--manifest", required=True, help="dataset manifest with ground truth")
    e.add_argument("--out", required=True, help="PR curve csv")
    e.add_argument("--tolerance-frac", type=float, default=0.0075, help="match distance as a fraction of the diagonal")
    e.add_argument("--thresholds", type=int, default=99, help="number of evenly spaced thresholds")
    e.add_argument("--consensus", choices=("over3", "all"), default="all", help="ground-truth consensus policy")
    e.add_argument("--no-nms", action="store_true", help="skip thinning (maps are already thin)")

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0, help="seed of the random test inputs")
    g.add_argument("--layers-only", action="store_true", help="skip the end-to-end network spot checks")

    i = sub.add_parser("inspect", help="parameter table of a checkpoint or default build")
    i.add_argument("--checkpoint", help="checkpoint to inspect (default: a fresh VGG-16 build)")
    i.add_argument("--gen-synthetic", metavar="DIR", help="write the synthetic 3-image dataset to DIR")
    i.add_argument("--size", type=int, default=64, help="synthetic image size")
    return p


def _cmd_train(args) -> int:
    overrides = {}
    for key, attr in (("consensus", "consensus"), ("input_size", "size"), ("max_iter", "max_iter"),
                      ("base_lr", "lr"), ("seed", "seed")):
        if getattr(args, attr) is not None:
            overrides[key] = getattr(args, attr)
    cfg = TrainConfig.from_file(args.config, **overrides) if args.config else TrainConfig(**overrides)
    dataset = D.load_dataset(args.manifest)
    graph = TDCEDN(args.widths, seed=cfg.seed, precision=args.precision)
    try:
        result = train(graph, dataset, cfg, out_dir=args.out_dir, resume_from=args.resume)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good state in {exc.snapshot}", file=sys.stderr)
        return EXIT_RUNTIME
    if result.log:
        it, lr, side, pred, total = result.log[-1]
        print(f"iterations {it} final_loss {total!r} side {side!r} pred {pred!r}")
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    graph = load_checkpoint(args.checkpoint)
    entries = D.read_manifest(args.manifest, require_gt=False)
    for path in I.predict_dir(graph, entries, args.out_dir, args.border):
        print(path)
    return EXIT_OK


def _cmd_fuse(args) -> int:
    for path in I.fuse_dirs(args.a, args.b, args.out_dir, I.FusionConfig(args.gamma)):
        print(path)
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = MatchConfig(tolerance_frac=args.tolerance_frac, n_thresholds=args.thresholds)
    entries = D.read_manifest(args.manifest)
    records = evaluate_dir(args.pred_dir, entries, cfg, args.consensus, thin=not args.no_nms)
    s = emit_pr_csv(records, args.out)
    print(f"ODS {s.ods:.6f} (t={s.ods_threshold:.2f}) OIS {s.ois:.6f} AP {s.ap:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    ok = True
    for r in run_suite(args.seed, network=not args.layers_only):
        ok &= r.passed
        print(f"{r.name:24s} {r.error:.3e} (tol {r.tol:.0e}) {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _cmd_inspect(args) -> int:
    if args.gen_synthetic:
        manifest = D.generate_synthetic(args.gen_synthetic, size=args.size)
        print(f"manifest {manifest}")
        if not args.checkpoint:
            return EXIT_OK
    if args.checkpoint:
        precision, records = read_records(args.checkpoint)
        graph = load_checkpoint(args.checkpoint)
        print(f"checkpoint {args.checkpoint} precision {precision.value} records {len(records)}")
    else:
        graph = TDCEDN(init=False)
        print("default build (VGG-16 widths)")
    for name, t in graph.params.items():
        print(f"{name:28s} {'x'.join(map(str, t.data.shape)):>16s} {t.data.size:>10d}")
    print(f"encoder_params {graph.encoder_param_count()}")
    print(f"total_params {graph.param_count()}")
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "predict": _cmd_predict,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, CheckpointError) as exc:
        print(f"tdcedn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
