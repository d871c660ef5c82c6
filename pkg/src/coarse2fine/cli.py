"""Command-line entry points: gen-data, train, eval, verify-bounds, and
the end-to-end synthetic comparison (reproduce-synthetic).

Exit codes: 0 success (and bounds hold), 1 internal error / bounds violated,
2 usage error, 3 IO failure, 4 unsupported data.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys

import numpy as np

from .data import (Dataset, DatasetFormatError, gen_blob_dataset,
                   gen_patch_dataset, load_dataset, load_dataset_csv,
                   save_dataset)
from .evaluate import evaluate_model
from .model import load_checkpoint, save_checkpoint
from .theory import NonUniformClassSizeError, verify_theorem
from .trainer import OBJECTIVES, TrainConfig, train

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_IO, EXIT_UNSUPPORTED = 0, 1, 2, 3, 4


class UsageError(ValueError):
    pass


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip() != ""]


def _load_data(path: str, fmt: str) -> Dataset:
    if fmt == "csv":
        return load_dataset_csv(path)
    return load_dataset(path)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["cfds", "csv"], default="cfds")


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.kind == "patch":
        if args.big < 1 or args.small < 1:
            raise UsageError("--big and --small must be >= 1")
        d = gen_patch_dataset(args.n, args.big, args.small, args.img_h,
                              args.img_w, args.big_size, args.small_size,
                              seed=args.seed)
    else:
        if min(args.classes, args.fine_per_coarse, args.z, args.dim) < 1:
            raise UsageError("blob counts must be >= 1")
        d = gen_blob_dataset(args.classes, args.fine_per_coarse, args.z,
                             args.dim, args.coarse_spread, args.fine_spread,
                             args.noise, seed=args.seed)
    save_dataset(d, args.out)
    print(f"wrote {args.out}: n={d.n} dim={d.dim} C={d.C} F={d.F}")
    return EXIT_OK


def _merge_config(args: argparse.Namespace) -> TrainConfig:
    """Flags override the optional --config JSON, which overrides defaults."""
    cfg = TrainConfig()
    file_cfg = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    flag_map = {
        "objective": args.objective, "epochs": args.epochs,
        "ip_start_epoch": args.m_epoch, "P": args.clusters,
        "lambda_I": args.lambda_i, "lambda_P": args.lambda_p,
        "lr": args.lr, "momentum": args.momentum,
        "weight_decay": args.wd, "lr_decay_factor": args.decay_factor,
        "batch_size": args.batch, "seed": args.seed,
        "cosine": args.cosine, "mlp_head": args.mlp_head,
        "temperature": args.temp, "embed_dim": args.embed_dim,
        "pad": args.pad,
        "lr_decay_epochs": _int_list(args.decay_epochs) if args.decay_epochs else None,
        "hidden": _int_list(args.hidden) if args.hidden else None,
    }
    for key, val in file_cfg.items():
        if not hasattr(cfg, key):
            raise UsageError(f"unknown config key {key!r}")
        setattr(cfg, key, val)
    for key, val in flag_map.items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    dataset = _load_data(args.data, args.format)
    if args.img_h and args.img_w:
        dataset.image_shape = (args.img_h, args.img_w)
    cfg = _merge_config(args)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.objective == "opt" and dataset.fine_labels is None:
        raise UsageError("objective 'opt' needs fine labels in the dataset")
    params, metrics, _ = train(cfg, dataset)
    save_checkpoint(params, args.out)
    metrics_path = args.metrics or args.out + ".metrics.jsonl"
    with open(metrics_path, "w") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {args.out} and {metrics_path} "
          f"({cfg.objective}, {cfg.epochs} epochs)")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = _load_data(args.data, args.format)
    params = load_checkpoint(args.checkpoint)
    if params.encoder[0][0].shape[0] != dataset.dim:
        raise UsageError("checkpoint input dimension does not match dataset")
    report = evaluate_model(params, dataset, _int_list(args.recall_at))
    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(f"wrote {args.out}: " +
          " ".join(f"R@{k}={v:.3f}" for k, v in report.recall_at.items()))
    return EXIT_OK


def cmd_verify_bounds(args: argparse.Namespace) -> int:
    dataset = _load_data(args.data, args.format)
    if dataset.fine_labels is None:
        raise NonUniformClassSizeError("dataset has no fine labels")
    params = load_checkpoint(args.checkpoint)
    if params.encoder[0][0].shape[0] != dataset.dim:
        raise UsageError("checkpoint input dimension does not match dataset")
    from .model import encode
    emb, _ = encode(params, dataset.examples)
    report = verify_theorem(emb, params.W_C, params.W_I,
                            dataset.coarse_labels, dataset.fine_labels,
                            which=args.theorem)
    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(f"theorem {args.theorem}: all_hold={report.all_hold} "
          f"slack_log_min={report.slack_log_min:.6g}")
    return EXIT_OK if report.all_hold else EXIT_INTERNAL


# --- synthetic comparison ------------------------------------------------

SYNTH_KS = [1, 2, 4, 8]


def synth_train_config(objective: str, seed: int, epochs: int = 150) -> TrainConfig:
    """Hyperparameters for the 512-image patch comparison.

    The narrow encoder (64-32-16) and aggressive crop padding make the
    task depend on position-invariant color features; wider settings let
    the coarse-only baseline retrieve fine classes through residual
    input similarity, masking the differences between objectives.
    """
    return TrainConfig(
        objective=objective, epochs=epochs,
        lambda_I=0.68, lambda_P=1.0,
        lr=0.01, momentum=0.9, weight_decay=5e-3,
        lr_decay_epochs=sorted({e for e in (epochs * 6 // 10,
                                            epochs * 8 // 10) if e > 0}),
        lr_decay_factor=5.0, batch_size=32, seed=seed,
        hidden=[64, 32], embed_dim=16, pad=8,
    )


def reproduce_synthetic(seeds: list[int], out_dir: str, epochs: int = 150,
                        n: int = 512, n_big: int = 32, n_small: int = 128
                        ) -> list[dict]:
    """Patch-image comparison of all objectives; returns the rows that are
    also written to comparison.csv / comparison.json (medians included)."""
    os.makedirs(out_dir, exist_ok=True)
    rows: list[dict] = []
    for seed in seeds:
        dataset = gen_patch_dataset(n, n_big, n_small, seed=seed)
        seed_dir = os.path.join(out_dir, f"seed{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        save_dataset(dataset, os.path.join(seed_dir, "data.cfds"))
        for objective in OBJECTIVES:
            cfg = synth_train_config(objective, seed, epochs)
            params, metrics, _ = train(cfg, dataset)
            save_checkpoint(params, os.path.join(seed_dir, f"{objective}.ckpt"))
            with open(os.path.join(seed_dir, f"{objective}.metrics.jsonl"), "w") as fh:
                for rec in metrics:
                    fh.write(json.dumps(rec) + "\n")
            report = evaluate_model(params, dataset, SYNTH_KS)
            row = {"objective": objective, "seed": seed}
            row.update({f"R@{k}": report.recall_at[k] for k in SYNTH_KS})
            rows.append(row)
            print(f"seed {seed} {objective:9s} " +
                  " ".join(f"R@{k}={row[f'R@{k}']:.3f}" for k in SYNTH_KS))
    for objective in OBJECTIVES:
        med = {"objective": objective, "seed": "median"}
        for k in SYNTH_KS:
            med[f"R@{k}"] = statistics.median(
                r[f"R@{k}"] for r in rows
                if r["objective"] == objective and r["seed"] != "median")
        rows.append(med)
    header = ["objective", "seed"] + [f"R@{k}" for k in SYNTH_KS]
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out_dir, "comparison.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
    return rows


def cmd_reproduce_synthetic(args: argparse.Namespace) -> int:
    reproduce_synthetic(_int_list(args.seeds), args.out, epochs=args.epochs)
    print(f"wrote {os.path.join(args.out, 'comparison.csv')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coarse2fine",
        description="Representation learning from coarse labels, with "
                    "retrieval evaluation and bound verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=["patch", "blob"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--big", type=int, default=32)
    p.add_argument("--small", type=int, default=128)
    p.add_argument("--img-h", type=int, default=32)
    p.add_argument("--img-w", type=int, default=32)
    p.add_argument("--big-size", type=int, default=12)
    p.add_argument("--small-size", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--fine-per-coarse", type=int, default=5)
    p.add_argument("--z", type=int, default=10)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--coarse-spread", type=float, default=10.0)
    p.add_argument("--fine-spread", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_data_args(p)
    p.add_argument("--objective", choices=list(OBJECTIVES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--m-epoch", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--lambda-i", type=float)
    p.add_argument("--lambda-p", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--decay-epochs")
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cosine", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--mlp-head", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--temp", type=float)
    p.add_argument("--hidden")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--pad", type=int)
    p.add_argument("--img-h", type=int, help="treat loaded data as images")
    p.add_argument("--img-w", type=int)
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval/accuracy report")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--recall-at", default="1,2,4,8")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-bounds", help="check the probability bounds")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--theorem", type=int, choices=[1, 2], default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("reproduce-synthetic",
                       help="patch-image comparison across objectives")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonUniformClassSizeError as exc:
        print(f"unsupported data: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except DatasetFormatError as exc:
        print(f"bad dataset file: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
