"""Command-line front-end: run experiments, dump diagnostics, manage data.

Subcommands: run, attention, inspect-checkpoint, gen-data, partition.
Config values come from an optional key=value file plus ``--key=value``
overrides (e.g. ``--train.lr0=0.01``); REEFL_THREADS caps client-training
parallelism.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .checkpoint import describe_checkpoint, load_checkpoint, save_checkpoint
from .config import REGISTRY, parse_config
from .data import lda_partition, load_dataset, save_dataset, synth_dataset, write_partition_manifest
from .data import PartitionSpec
from .errors import ConfigError, InputError, ReeflError
from .federation import full_view, run_experiment_with_state, write_metrics_csv
from .ree import attention_maps, forward_with_exits


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull config overrides (--section.key=value) out of the raw argv."""
    overrides, rest = [], []
    for token in argv:
        body = token[2:] if token.startswith("--") else token
        key = body.split("=", 1)[0]
        if "=" in body and key in REGISTRY:
            overrides.append(body)
        else:
            rest.append(token)
    return overrides, rest


def cmd_run(config_path, overrides) -> int:
    try:
        cfg = parse_config(config_path, overrides)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(cfg.resolved_text())
    try:
        reports, state = run_experiment_with_state(cfg)
    except ReeflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_metrics_csv(out_dir / "metrics.csv", reports, state.model.schedule.num_exits)
    save_checkpoint(out_dir / "checkpoint.ckpt", state.model)
    evaluated = [r for r in reports if r.exit_accuracy is not None]
    if evaluated:
        last = evaluated[-1]
        accs = " ".join(f"{a:.3f}" for a in last.exit_accuracy)
        print(f"round {last.round_index}: exit accuracies [{accs}] mean {last.mean_accuracy:.3f}")
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def cmd_attention(checkpoint_path, dataset_path, sample_ids, output) -> int:
    model = load_checkpoint(checkpoint_path)
    examples = load_dataset(dataset_path)
    view = full_view(model)
    rows = []
    for sid in sample_ids:
        if not 0 <= sid < len(examples):
            raise InputError(f"sample id {sid} outside dataset of {len(examples)} examples")
        image = examples[sid].image[None]
        trace = forward_with_exits(view, image, model.schedule, modulation=True)
        for block in range(1, model.config.depth + 1):
            maps = attention_maps(trace, block, view)
            for variant, arr in (("x", maps.query_x), ("m", maps.query_m), ("c", maps.query_c)):
                if arr is None:
                    continue
                for token_index, weight in enumerate(arr[0]):
                    rows.append((sid, block, variant, token_index, f"{weight:.8f}"))
    with open(output, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "block", "variant", "token_index", "weight"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} attention rows to {output}")
    return 0


def cmd_inspect(checkpoint_path) -> int:
    print(describe_checkpoint(checkpoint_path))
    return 0


def cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    examples = synth_dataset(
        args.classes, args.per_class,
        image_size=args.image_size, channels=args.channels,
        noise=args.noise, rng=rng,
    )
    save_dataset(args.output, examples, num_classes=args.classes)
    print(f"wrote {len(examples)} examples to {args.output}")
    return 0


def cmd_partition(args) -> int:
    examples = load_dataset(args.dataset)
    labels = [ex.label for ex in examples]
    assignment = lda_partition(labels, PartitionSpec(args.clients, args.alpha, seed=args.seed))
    write_partition_manifest(args.output, assignment)
    sizes = sorted(len(p) for p in assignment)
    print(f"wrote manifest for {args.clients} clients to {args.output} (sizes {sizes[0]}..{sizes[-1]})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reefl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a federated experiment")
    run_p.add_argument("--config", default=None, help="key=value config file")

    attn_p = sub.add_parser("attention", help="dump per-block attention maps to CSV")
    attn_p.add_argument("--checkpoint", required=True)
    attn_p.add_argument("--dataset", required=True)
    attn_p.add_argument("--samples", required=True, help="comma-separated sample ids")
    attn_p.add_argument("--output", default="attention.csv")

    inspect_p = sub.add_parser("inspect-checkpoint", help="print checkpoint header and tensors")
    inspect_p.add_argument("checkpoint")

    gen_p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    gen_p.add_argument("--output", required=True)
    gen_p.add_argument("--classes", type=int, default=4)
    gen_p.add_argument("--per-class", dest="per_class", type=int, default=100)
    gen_p.add_argument("--image-size", dest="image_size", type=int, default=16)
    gen_p.add_argument("--channels", type=int, default=1)
    gen_p.add_argument("--noise", type=float, default=0.25)
    gen_p.add_argument("--seed", type=int, default=0)

    part_p = sub.add_parser("partition", help="write a client partition manifest CSV")
    part_p.add_argument("--dataset", required=True)
    part_p.add_argument("--clients", type=int, required=True)
    part_p.add_argument("--alpha", type=float, default=1.0)
    part_p.add_argument("--seed", type=int, default=0)
    part_p.add_argument("--output", default="partition.csv")

    return parser


def main(argv=None) -> int:
    raw = list(sys.argv[1:] if argv is None else argv)
    overrides, rest = _split_overrides(raw)
    args = build_parser().parse_args(rest)
    try:
        if args.command == "run":
            return cmd_run(args.config, overrides)
        if args.command == "attention":
            ids = [int(s) for s in args.samples.split(",") if s.strip()]
            return cmd_attention(args.checkpoint, args.dataset, ids, args.output)
        if args.command == "inspect-checkpoint":
            return cmd_inspect(args.checkpoint)
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "partition":
            return cmd_partition(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ReeflError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
