"""Command-line interface.

Subcommands: ``train``, ``sweep-depth``, ``ablate``, ``gen-sbm``, ``inspect``.
Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import CnagnnError, ContractError, IngestionError, ValidationError
from .graphs import (
    SbmParams,
    generate_sbm,
    load_bundle,
    node_homophily,
    with_block_targets,
    write_bundle,
)
from .training import (
    TrainConfig,
    ablation_run,
    depth_sweep,
    parse_subset,
    train,
    write_ablation_csv,
    write_sweep_csv,
)

ALL_SUBSETS = ["CNA", "CN", "CA", "NA", "C", "N", "A", "none"]


def _parse_sbm(text: str) -> SbmParams:
    parts = text.split(",")
    if len(parts) != 7:
        raise ContractError("--sbm expects 'n,blocks,p_in,p_out,dim,sep,sigma'")
    try:
        return SbmParams(
            num_nodes=int(parts[0]),
            num_blocks=int(parts[1]),
            p_in=float(parts[2]),
            p_out=float(parts[3]),
            feature_dim=int(parts[4]),
            block_mean_separation=float(parts[5]),
            feature_noise_sigma=float(parts[6]),
        ).validate()
    except ValueError as exc:
        raise ContractError(f"--sbm: {exc}") from exc


def _parse_split(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ContractError("--split expects 'train,val,test'")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ContractError(f"--split: {exc}") from exc


def _parse_seeds(args) -> tuple[int, ...]:
    if args.seeds is not None:
        lo, _, hi = args.seeds.partition("..")
        try:
            return tuple(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ContractError("--seeds expects 'A..B' (inclusive)") from exc
    return (args.seed,)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", help="bundle directory")
    parser.add_argument("--sbm", help="'n,blocks,p_in,p_out,dim,sep,sigma'")
    parser.add_argument("--arch", choices=["gcn", "sage"], default="gcn")
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--hidden", type=int, default=16)
    parser.add_argument("--activation", choices=["none", "relu", "cna"], default="cna")
    parser.add_argument("--clusters", type=int, default=4)
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--lr", type=float, default=1e-2)
    parser.add_argument("--lr-act", type=float, default=1e-2)
    parser.add_argument("--weight-decay", type=float, default=0.0)
    parser.add_argument("--eps", type=float, default=1e-5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--seeds", help="inclusive range 'A..B' (sweeps)")
    parser.add_argument("--split", default="0.6,0.2,0.2")
    parser.add_argument("--task", choices=["classify", "regress"])
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--dump-clusters", action="store_true")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnagnn")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "sweep-depth", "ablate"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "sweep-depth":
            p.add_argument("--depths", default="2,8,32", help="comma-separated layer counts")
        if name == "ablate":
            p.add_argument(
                "--subsets",
                default=",".join(ALL_SUBSETS),
                help="comma-separated tokens over letters C/N/A, or 'none'",
            )

    p = sub.add_parser("gen-sbm")
    p.add_argument("--sbm", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", choices=["classify", "regress"], default="classify")
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect")
    p.add_argument("--dataset", required=True)
    return parser


def _config_from_args(args) -> TrainConfig:
    if (args.dataset is None) == (args.sbm is None):
        raise ContractError("exactly one of --dataset or --sbm is required")
    sbm = None
    if args.sbm is not None:
        sbm = _parse_sbm(args.sbm)
        sbm.seed = args.seed
    return TrainConfig(
        dataset=args.dataset,
        sbm=sbm,
        arch=args.arch,
        num_layers=args.layers,
        hidden=args.hidden,
        activation=args.activation,
        clusters=args.clusters,
        epochs=args.epochs,
        lr=args.lr,
        lr_act=args.lr_act,
        weight_decay=args.weight_decay,
        eps=args.eps,
        seed=args.seed,
        split=_parse_split(args.split),
        task=args.task,
        out_dir=args.out,
        dump_clusters=args.dump_clusters,
    ).validate()


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    record = train(config)
    if record.failed:
        print(f"run failed: {record.failure}", file=sys.stderr)
        return 2
    print(f"best_epoch={record.best_epoch}")
    print(f"val_{record.metric_name}={record.val_metric:.6f}")
    print(f"test_{record.metric_name}={record.test_metric:.6f}")
    return 0


def _cmd_sweep(args) -> int:
    config = _config_from_args(args)
    try:
        depths = [int(d) for d in args.depths.split(",") if d.strip()]
    except ValueError as exc:
        raise ContractError("--depths expects comma-separated integers") from exc
    rows = depth_sweep(config, depths, seeds=_parse_seeds(args))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(rows, out / "depth_sweep.csv")
    for row in rows:
        print(
            f"depth={row['depth']} activation={row['activation']} seed={row['seed']} "
            f"status={row['status']} test_metric={row['test_metric']:.6f}"
        )
    return 0


def _cmd_ablate(args) -> int:
    config = _config_from_args(args)
    subsets = [parse_subset(tok) for tok in args.subsets.split(",") if tok.strip() != ""]
    rows = ablation_run(config, subsets, seeds=_parse_seeds(args))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(rows, out / "ablation.csv")
    for row in rows:
        print(
            f"subset={row['subset']} mean={row['mean_metric']:.6f} "
            f"std={row['std_metric']:.6f} seeds={row['num_seeds']}"
        )
    return 0


def _cmd_gen_sbm(args) -> int:
    params = _parse_sbm(args.sbm)
    params.seed = args.seed
    bundle = generate_sbm(params)
    if args.task == "regress":
        bundle = with_block_targets(bundle, seed=args.seed)
    write_bundle(bundle, args.out)
    print(f"wrote bundle: nodes={bundle.num_nodes} edges={bundle.num_edges} -> {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    bundle = load_bundle(args.dataset)
    print(f"num_nodes={bundle.num_nodes}")
    print(f"num_edges={bundle.num_edges}")
    print(f"num_features={bundle.num_features}")
    print(f"task={bundle.task}")
    if bundle.task == "classify":
        print(f"num_classes={bundle.num_classes}")
        print(f"homophily={node_homophily(bundle):.4f}")
    if bundle.splits is not None:
        for name in ("train", "val", "test"):
            print(f"split_{name}={int((bundle.splits == name).sum())}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "sweep-depth": _cmd_sweep,
    "ablate": _cmd_ablate,
    "gen-sbm": _cmd_gen_sbm,
    "inspect": _cmd_inspect,
}


def cli_main(argv: list[str] | None = None) -> int:
    """Parse and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse prints usage itself; --help exits 0, bad flags exit 1.
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except (ContractError, ValidationError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CnagnnError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
