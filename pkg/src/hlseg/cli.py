"""Command-line entry point: ``hlseg <command> [options]``.

Exit status is 0 on success, 2 for usage and configuration errors and 1 for
failures at run time.  Failures print one line to stderr of the form
``hlseg: error[<category>]: <message>``.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import data, evaluate, selftest, trainer
from .hlt import FormatError

RUN_ROOT_ENV = "HL_RUN_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def run_root():
    return os.environ.get(RUN_ROOT_ENV, "runs")


def _fresh_dir(path):
    """Refuse to write into another command's output; writers create the directory."""
    if os.path.isdir(path) and os.listdir(path):
        raise FileExistsError(f"output directory {path} already exists and is not empty")
    return path


def _config_epilog():
    lines = ["config keys (defaults):"]
    lines += [f"  {line}" for line in trainer.format_config(trainer.TrainConfig()).splitlines()]
    return "\n".join(lines)


def _build_config(args):
    cfg = trainer.TrainConfig()
    if args.config:
        cfg = trainer.load_config(args.config, cfg)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise trainer.ConfigError(f"--set expects key=value, got {item!r}")
        trainer.set_key(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = data.SceneConfig(seed=args.seed if args.seed is not None else 0)
    if args.size:
        cfg.image_size = trainer._parse_size(args.size)
    cfg.validate()
    out = args.out or os.path.join(run_root(), f"data_s{cfg.seed}")
    data.write_dataset(_fresh_dir(out), cfg, args.n, start=args.start)
    print(f"wrote {args.n} scenes to {out}")


def cmd_train(args):
    cfg = _build_config(args)
    if not cfg.train_dir:
        raise trainer.ConfigError("data.train_dir is not set (use --config or --set data.train_dir=DIR)")
    out = args.out or os.path.join(run_root(), f"{cfg.loss.variant}_s{cfg.seed}")
    trainer.train(cfg, out)
    log = trainer.read_log(out)
    print(f"trained {cfg.iterations} iterations into {out}; final L_f {log['L_f'][-1]:.6f}")


def cmd_continue(args):
    sample = data.read_sample(args.data, args.index)
    out = args.out or os.path.join(run_root(), f"continue_{args.index}")
    if os.path.exists(out):
        raise FileExistsError(f"output directory {out} already exists")
    loss = trainer.TrainConfig().loss
    if args.config or args.set:
        loss = _build_config(args).loss
    L, H = trainer.continue_train(args.checkpoint, sample, args.iters, loss, lr=args.lr, out_dir=out)
    ssim = evaluate.ssim(H[min(10, args.iters)], H[-1], rescale="each")
    print(f"wrote {len(H)} map pairs to {out}; SSIM(H@{min(10, args.iters)}, H@{args.iters}) = {ssim:.4f}")


def cmd_eval(args):
    samples = data.read_dataset(args.data)
    res = evaluate.evaluate_run(args.run, samples)
    names = data.CLASS_NAMES if len(res.per_class) == len(data.CLASS_NAMES) else None
    lines = [f"mIoU\t{res.miou:.6f}"]
    for i, v in enumerate(res.per_class):
        lines.append(f"IoU_{names[i] if names else i}\t{v:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(_fresh_dir(args.out), exist_ok=True)
        with open(os.path.join(args.out, "eval.tsv"), "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_export(args):
    written = evaluate.export_maps(args.run, _fresh_dir(args.out))
    print(f"rendered {len(written)} maps to {args.out}")


def cmd_compare(args):
    samples = data.read_dataset(args.data)
    out = args.out or os.path.join(run_root(), "compare")
    report = evaluate.compare_runs(args.runs, samples, None, n_bins=args.bins, class_names=data.CLASS_NAMES)
    evaluate.write_report(report, _fresh_dir(out))
    with open(os.path.join(out, "report.txt")) as fh:
        sys.stdout.write(fh.read())


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    errs = selftest.gradcheck_ops(seed)
    for name, e in errs.items():
        print(f"{'PASS' if e < selftest.TOL else 'FAIL'}  {name:<14} {e:.3e}")
    if max(errs.values()) >= selftest.TOL:
        raise RuntimeError(f"gradient check above {selftest.TOL}")


def cmd_selftest(args):
    if not selftest.run(args.seed if args.seed is not None else 0):
        raise RuntimeError("self-test failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "continue": cmd_continue,
    "eval": cmd_eval,
    "export": cmd_export,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="hlseg", description=__doc__.split("\n")[0], epilog=_config_epilog(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_config_epilog(), formatter_class=fmt)
        p.add_argument("--seed", type=int, help="random seed (commands without randomness ignore it)")
        return p

    def config_flags(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = add("gen-data", "write a synthetic scene dataset")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--start", type=int, default=0, help="first scene index")
    p.add_argument("--size", help="image size HxW (default 64x64)")
    p.add_argument("--out", help=f"output directory (default ${RUN_ROOT_ENV}/data_s<seed>)")

    p = add("train", "train one model into a fresh run directory")
    config_flags(p)
    p.add_argument("--out", help=f"run directory (default ${RUN_ROOT_ENV}/<variant>_s<seed>)")

    p = add("continue", "keep training a checkpoint on one image and record its maps")
    config_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory holding the image")
    p.add_argument("--index", type=int, required=True, help="scene index within the dataset")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", help="directory for the map series")

    p = add("eval", "mIoU and per-class IoU of a run on a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write eval.tsv here")

    p = add("export", "render a run's dumped maps to PGM")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)

    p = add("compare", "tabulate several runs on one evaluation set")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=10, help="hardness quantile bins")
    p.add_argument("--out", help=f"report directory (default ${RUN_ROOT_ENV}/compare)")

    add("gradcheck", "finite-difference check of every differentiable op")
    add("selftest", "run the fast invariant suite")
    return parser


def _category(exc):
    if isinstance(exc, (UsageError, trainer.ConfigError)):
        return "usage" if isinstance(exc, UsageError) else "config", 2
    if isinstance(exc, trainer.TrainingDiverged):
        return "diverged", 1
    if isinstance(exc, FormatError):
        return "format", 1
    if isinstance(exc, (OSError, KeyError)):
        return "io", 1
    if isinstance(exc, ValueError):
        return "invalid", 1
    return "runtime", 1


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"hlseg: error[usage]: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with np.errstate(over="ignore", under="ignore"):
            COMMANDS[args.command](args)
    except Exception as exc:
        category, code = _category(exc)
        message = str(exc).replace("\n", " ")
        print(f"hlseg: error[{category}]: {message}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
