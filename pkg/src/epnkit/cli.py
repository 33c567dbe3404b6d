"""Command-line surface.

Subcommands: `group build`, `audit`, `bench`, `train pose`, `train cls`,
`convert`. Exit codes: 0 success, 1 a check or criterion failed, 2 usage or
I/O error. Every command is deterministic for a fixed --seed (bench needs
--dry, since wall-clock timings are not reproducible).
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .audit import run_audit
from .bench import run_bench, write_csv
from .group import build_group, canonical_kind
from .sampling import (
    CLOUD_MAGIC,
    load_cloud_binary,
    load_cloud_text,
    save_cloud_binary,
    save_cloud_text,
)

GROUP_CHOICES = ["tetra", "octa", "icosa", "tetrahedral", "octahedral", "icosahedral"]


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(obj, out_path) -> None:
    text = dump_json(obj)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _default_threads() -> int:
    env = os.environ.get("EPNKIT_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="RNG seed (u64)")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker cap; 1 is the reproducibility mode (default; env EPNKIT_THREADS)",
    )
    parser.add_argument("--out", default=None, help="output path (default: stdout for reports)")
    parser.add_argument(
        "--group", choices=GROUP_CHOICES, default="icosa", help="finite rotation group"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epnkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"epnkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_group = sub.add_parser("group", help="finite rotation group utilities")
    group_sub = p_group.add_subparsers(dest="group_command", required=True)
    p_build = group_sub.add_parser("build", help="construct a group and emit it as JSON")
    _common_flags(p_build)
    p_build.add_argument("--kind", choices=GROUP_CHOICES, default=None,
                         help="group kind (defaults to --group)")

    p_audit = sub.add_parser("audit", help="run the equivariance/invariance audit")
    _common_flags(p_audit)
    p_audit.add_argument("--n-points", type=int, default=64)
    p_audit.add_argument("--channels", type=int, default=8)
    p_audit.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # negative-control hook

    p_bench = sub.add_parser("bench", help="MAC bookkeeping and timing sweep")
    _common_flags(p_bench)
    p_bench.add_argument("--kp", default="2,4,8,16", help="comma list of spatial kernel sizes")
    p_bench.add_argument("--kg", default="2,4,8,16", help="comma list of rotation tap counts")
    p_bench.add_argument("--channels", type=int, default=8)
    p_bench.add_argument("--n-points", type=int, default=64)
    p_bench.add_argument("--repeats", type=int, default=5)
    p_bench.add_argument("--dry", action="store_true", help="MAC counts only; deterministic output")
    p_bench.add_argument("--csv", default=None, help="also write the sweep as CSV")

    p_train = sub.add_parser("train", help="desk-scale toy training")
    train_sub = p_train.add_subparsers(dest="task", required=True)
    for task in ("pose", "cls"):
        p_task = train_sub.add_parser(task)
        _common_flags(p_task)
        p_task.add_argument("--config", required=True, help="key = value config file")
        p_task.add_argument("--checkpoint", default=None, help="write trained weights here")

    p_convert = sub.add_parser("convert", help="convert point clouds between text and binary")
    _common_flags(p_convert)
    p_convert.add_argument("--input", required=True)
    p_convert.add_argument(
        "--to", choices=["text", "binary"], default=None,
        help="target format (default: the opposite of the input format)",
    )
    return parser


def cmd_group_build(args) -> int:
    kind = canonical_kind(args.kind or args.group)
    group = build_group(kind)
    _emit(group.to_dict(), args.out)
    return 0


def cmd_audit(args) -> int:
    report = run_audit(
        group_kind=canonical_kind(args.group),
        n_points=args.n_points,
        channels=args.channels,
        seed=args.seed,
        corrupt=args.corrupt,
    )
    _emit(report, args.out)
    if not report["passed"]:
        failed = [c["name"] for c in report["checks"] if not c["pass"]]
        print(f"audit failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    kp = [int(v) for v in args.kp.split(",") if v.strip()]
    kg = [int(v) for v in args.kg.split(",") if v.strip()]
    report = run_bench(
        kp_values=kp,
        kg_values=kg,
        channels=args.channels,
        n_points=args.n_points,
        group_kind=canonical_kind(args.group),
        repeats=args.repeats,
        dry=args.dry,
        seed=args.seed,
    )
    _emit(report, args.out)
    if args.csv:
        write_csv(args.csv, report)
    return 0


def cmd_train(args) -> int:
    from .train.checkpoint import save_checkpoint
    from .train.config import load_config
    from .train.tasks import toy_cls_task, toy_pose_task

    try:
        cfg = load_config(args.config, seed=args.seed, group=canonical_kind(args.group))
    except FileNotFoundError as exc:
        print(f"config not found: {exc.filename}", file=sys.stderr)
        return 2
    if args.task == "pose":
        report, estimator = toy_pose_task(cfg)
        arrays = estimator.parameter_arrays()
    else:
        report, estimators = toy_cls_task(cfg)
        arrays = {}
        for pooling, est in estimators.items():
            arrays.update({f"{pooling}/{k}": v for k, v in est.parameter_arrays().items()})
    _emit(report, args.out)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, arrays)
    return 0


def cmd_convert(args) -> int:
    src = Path(args.input)
    if not src.exists():
        print(f"input not found: {src}", file=sys.stderr)
        return 2
    is_binary = src.read_bytes()[:4] == CLOUD_MAGIC
    target = args.to or ("text" if is_binary else "binary")
    if args.out is None:
        print("convert requires --out", file=sys.stderr)
        return 2
    labels = None
    if is_binary:
        points = load_cloud_binary(src)
    else:
        points, labels = load_cloud_text(src)
    if target == "text":
        save_cloud_text(args.out, points, labels)
    else:
        if labels is not None:
            print("note: binary format stores coordinates only; labels dropped", file=sys.stderr)
        save_cloud_binary(args.out, points)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads if args.threads is not None else _default_threads()
    args.threads = max(1, threads)
    try:
        if args.command == "group":
            return cmd_group_build(args)
        if args.command == "audit":
            return cmd_audit(args)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "convert":
            return cmd_convert(args)
        parser.error(f"unknown command {args.command!r}")
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
