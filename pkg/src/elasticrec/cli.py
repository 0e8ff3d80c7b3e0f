"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 data error,
5 I/O error, 6 contract violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import bench, kernels
from . import tensor as T
from .config import load_config
from .data import load_dataset, synth_markov
from .errors import ConfigError, ContractError, DataError, ElasticError
from .imr import SubKeySets, ExpertBank, UsageStats, retrieve_bruteforce, retrieve_product_keys
from .model import load_checkpoint, save_checkpoint
from .train import evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_CONTRACT = 0, 2, 3, 4, 5, 6

log = logging.getLogger("elasticrec")


def _resolve_config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _write_manifest(out_dir, command, config, **extra):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": command, "config": config.to_dict() if config else None,
                "kernel_backend": kernels.BACKEND, **extra}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    log.info("resolved run: %s", json.dumps(manifest, sort_keys=True))


def format_metrics(metrics, cutoffs=(10, 20)):
    """Fixed-width table: one row per metric, one column per cutoff."""
    lines = ["metric" + "".join(f"\t@{k}" for k in cutoffs)]
    for name in ("ndcg", "hr", "mrr"):
        lines.append(name.upper() + "".join(f"\t{metrics[f'{name}@{k}']:.6f}" for k in cutoffs))
    return "\n".join(lines) + "\n"


def parse_metrics(text):
    rows = [ln.split("\t") for ln in text.strip().splitlines()]
    cutoffs = [int(c.lstrip("@")) for c in rows[0][1:]]
    return {f"{r[0].lower()}@{k}": float(v) for r in rows[1:] for k, v in zip(cutoffs, r[1:])}


def cmd_train(args):
    config = _resolve_config(args)
    dataset = load_dataset(args.data, args.format, args.min_count)
    out = args.out
    _write_manifest(out, "train", config, data=args.data, num_items=dataset.num_items,
                    num_users=dataset.num_users)
    metrics_path = os.path.join(out, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "valid_ndcg@10", "valid_hr@10", "valid_mrr@10", "seconds"])

        def on_epoch(row):
            writer.writerow([row["epoch"], f"{row['loss']:.6f}", f"{row['valid_ndcg@10']:.6f}",
                             f"{row['valid_hr@10']:.6f}", f"{row['valid_mrr@10']:.6f}",
                             f"{row['seconds']:.3f}"])
            fh.flush()

        model, history = train(dataset, config, callback=on_epoch)
    save_checkpoint(model, os.path.join(out, "checkpoint.npz"))
    test = evaluate(model, dataset, "test")
    sys.stdout.write(format_metrics(test))
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, args.format, args.min_count)
    sys.stdout.write(format_metrics(evaluate(model, dataset, args.split)))
    return EXIT_OK


def _parse_lengths(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--lengths must be comma-separated integers, got {text!r}", "lengths") from None


def cmd_bench(args):
    config = _resolve_config(args)
    lengths = _parse_lengths(args.lengths)
    rows = bench.run_scaling(lengths, config.d, config.k, config.n_layers, args.repeats,
                             args.warmup, config.seed, args.scope)
    table = bench.format_table(rows)
    slopes = bench.fit_complexity(rows) if len(set(lengths)) >= 3 else {}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.txt"), "w") as fh:
        fh.write(table)
        for b, s in slopes.items():
            fh.write(f"# flop_growth_exponent {b} {s:.4f}\n")
    with open(os.path.join(args.out, "bench.csv"), "w") as fh:
        fh.write(bench.to_csv(rows))
    _write_manifest(args.out, "bench", config, lengths=lengths, repeats=args.repeats, scope=args.scope)
    sys.stdout.write(table)
    for b, s in slopes.items():
        sys.stdout.write(f"flop growth exponent {b}: {s:.4f}\n")
    return EXIT_OK


def cmd_retrieve(args):
    """Compare product-key retrieval with the brute-force oracle on random queries."""
    config = _resolve_config(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if model.memory is None:
            raise ContractError("checkpoint has no interest memory")
        sub, bank, k = model.memory.sub, model.memory.bank, model.config.k
    else:
        n_keys = config.n_keys
        sub = SubKeySets.init(n_keys, config.d, config.seed, "demo")
        bank = ExpertBank.init(n_keys, config.d, config.seed, "demo")
        k = config.k
    rng = np.random.default_rng(config.seed)
    agree, pk_flops, bf_flops = 0, 0, 0
    for _ in range(args.queries):
        q = rng.normal(size=(1, sub.d))
        with T.count_flops() as c1:
            fast = retrieve_product_keys(q, bank, sub, k)
        with T.count_flops() as c2:
            exact = retrieve_bruteforce(q, bank, sub, k)
        pk_flops += c1.flops
        bf_flops += c2.flops
        agree += int(np.array_equal(fast.indices, exact.indices))
    sys.stdout.write(f"queries\t{args.queries}\nK\t{bank.size}\nk\t{k}\n"
                     f"index_agreement\t{agree / args.queries:.6f}\n"
                     f"flops_product_keys\t{pk_flops}\nflops_bruteforce\t{bf_flops}\n"
                     f"flop_ratio\t{pk_flops / bf_flops:.6f}\nbackend\t{kernels.BACKEND}\n")
    return EXIT_OK if agree == args.queries else EXIT_CONTRACT


def collect_usage(model, dataset, split="test", batch_size=512):
    if model.memory is None:
        raise ContractError("expert statistics need a checkpoint with interest memory retrieval enabled")
    inputs, _ = dataset.split(split, model.config.max_len)
    stats = UsageStats(model.memory.bank.size)
    with T.no_grad():
        for i in range(0, len(inputs), batch_size):
            model.forward(inputs[i:i + batch_size])
            idx, scores = model.last_retrieval
            stats.add(idx, scores)
    return stats


def cmd_expert_stats(args):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, args.format, args.min_count)
    stats = collect_usage(model, dataset, args.split)
    text = stats.to_text()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "expert_stats.tsv"), "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args):
    seed = 0 if args.seed is None else args.seed
    ds = synth_markov(args.users, args.items, args.seq_len, args.mode, seed, args.noise)
    target = args.out if args.out.endswith(".npz") else os.path.join(args.out, "dataset.npz")
    os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
    ds.save(target)
    sys.stdout.write(f"wrote {target}: {ds.num_users} users, {ds.num_items} items\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="elasticrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False, out=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", default="runs", help="output directory")
        if data:
            p.add_argument("--data", required=True, help="interaction log or .npz dataset cache")
            p.add_argument("--format", default="auto", choices=["auto", "ml1m", "csv", "tsv"])
            p.add_argument("--min-count", type=int, default=5)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = subs.add_parser("train", help="train a model")
    common(p, data=True)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="NDCG/HR/MRR at 10 and 20 on a split")
    common(p, data=True, checkpoint=True, out=False)
    p.add_argument("--split", default="test", choices=["valid", "test"])
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("bench", help="FLOP/memory/latency scaling of LDA vs full attention")
    common(p)
    p.add_argument("--lengths", default=",".join(map(str, bench.DEFAULT_LENGTHS)))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--scope", default="mixer", choices=bench.SCOPES)
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("retrieve", help="product-key vs brute-force retrieval demo")
    common(p, out=False)
    p.add_argument("--checkpoint")
    p.add_argument("--queries", type=int, default=100)
    p.set_defaults(func=cmd_retrieve)

    p = subs.add_parser("expert-stats", help="per-expert load/traffic and key usage rate")
    common(p, data=True, checkpoint=True)
    p.set_defaults(out=None)
    p.add_argument("--split", default="test", choices=["valid", "test"])
    p.set_defaults(func=cmd_expert_stats)

    p = subs.add_parser("synth", help="write a synthetic dataset cache")
    p.add_argument("--mode", default="successor", choices=["successor", "uniform", "clusters"])
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=50)
    p.add_argument("--seq-len", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="target .npz file or directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        for no, line in getattr(exc, "samples", [])[:5]:
            print(f"  line {no}: {line}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ElasticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
