"""Scaling benchmark: counted FLOPs, peak live-buffer bytes and latency per sequence length.

Three scopes are available:

``mixer``
    the token-mixing stack only: L x (aggregate + dispatch) for LDA, L x
    self-attention for the baseline, projections and residuals included.
    Per-token feed-forward blocks are excluded since both backbones share them.
``block``
    full layers including feed-forward blocks and normalisation.
``model``
    the complete recommender forward pass (embeddings, retrieval, scoring).

Memory is the high-water mark of bytes held by live tensors created during
one forward pass (activations only; parameters excluded).
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import (
    LdaLayerParams,
    SelfAttentionLayerParams,
    lda_aggregate,
    lda_dispatch,
    lda_layer,
    self_attention,
    self_attention_layer,
)
from .config import ModelConfig
from .errors import ContractError
from .model import ElasticModel

BACKBONES = ("lda", "full-attn")
SCOPES = ("mixer", "block", "model")
DEFAULT_LENGTHS = (64, 128, 256, 512, 1024)


@dataclass
class BenchRow:
    backbone: str
    n: int
    d: int
    k: int
    n_layers: int
    flops: int
    peak_bytes: int
    median_latency_s: float
    repeats: int
    status: str = "ok"


CSV_COLUMNS = tuple(f.name for f in fields(BenchRow))


def _make_runner(backbone, scope, n, d, k, n_layers, seed, stride=4, num_items=1000):
    rng = np.random.default_rng(seed)
    if scope == "model":
        cfg = ModelConfig(d=d, max_len=n, n_layers=n_layers, k=k, pool_size=max(k, 16) ** 2,
                          stride=stride, use_dispatcher=backbone == "lda", seed=seed)
        model = ElasticModel(cfg, num_items)
        seqs = rng.integers(1, num_items + 1, size=(1, n))
        return lambda: model.forward(seqs)

    x0 = T.tensor(rng.normal(size=(1, n, d)))
    if backbone == "lda":
        layers = [LdaLayerParams.init(d, seed, f"bench.{i}") for i in range(n_layers)]
        p0 = T.tensor(rng.normal(size=(1, k, d)))

        def run_lda():
            x, p = x0, p0
            for layer in layers:
                if scope == "block":
                    x, p = lda_layer(x, p, layer)
                else:
                    p = p + lda_aggregate(p, x, layer.aggregate)
                    x = x + lda_dispatch(x, p, layer.dispatch)
            return x

        return run_lda

    layers = [SelfAttentionLayerParams.init(d, seed, f"bench.{i}") for i in range(n_layers)]

    def run_full():
        x = x0
        for layer in layers:
            x = self_attention_layer(x, layer) if scope == "block" else x + self_attention(x, layer.attn)
        return x

    return run_full


def measure(backbone, n, d=32, k=16, n_layers=2, repeats=5, warmup=2, seed=0, scope="mixer"):
    """One benchmark row, measured in inference mode."""
    if backbone not in BACKBONES:
        raise ContractError(f"unknown backbone {backbone!r}")
    if scope not in SCOPES:
        raise ContractError(f"unknown scope {scope!r}")
    if repeats < 1 or warmup < 0:
        raise ContractError("repeats must be >= 1 and warmup >= 0")
    try:
        with T.no_grad():
            run = _make_runner(backbone, scope, n, d, k, n_layers, seed)
            for _ in range(warmup):
                run()
            with T.count_flops() as counter, T.track_memory() as mem:
                out = run()
                del out
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
    except MemoryError as exc:
        return BenchRow(backbone, n, d, k, n_layers, 0, 0, float("nan"), repeats, f"failed: {exc!r}")
    return BenchRow(backbone, n, d, k, n_layers, counter.flops, mem.peak,
                    statistics.median(times), repeats)


def run_scaling(lengths=DEFAULT_LENGTHS, d=32, k=16, n_layers=2, repeats=5, warmup=2,
                seed=0, scope="mixer", backbones=BACKBONES):
    """Measure every backbone at every length (sequentially, so timings do not interfere)."""
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ContractError("lengths must be sorted ascending")
    return [measure(b, n, d, k, n_layers, repeats, warmup, seed, scope)
            for b in backbones for n in lengths]


def fit_complexity(rows):
    """Least-squares slope of log(FLOPs) against log(N) for each backbone."""
    slopes = {}
    for b in dict.fromkeys(r.backbone for r in rows):
        pts = [(r.n, r.flops) for r in rows if r.backbone == b and r.status == "ok" and r.flops > 0]
        if len({n for n, _ in pts}) < 3:
            raise ContractError(f"need at least 3 lengths to fit {b}, got {len(pts)}")
        x = np.log([n for n, _ in pts])
        y = np.log([f for _, f in pts])
        slopes[b] = float(np.polyfit(x, y, 1)[0])
    return slopes


def format_table(rows):
    head = ("backbone", "N", "d", "k", "L", "FLOPs", "peak_bytes", "median_ms", "R", "status")
    body = [(r.backbone, r.n, r.d, r.k, r.n_layers, r.flops, r.peak_bytes,
             f"{r.median_latency_s * 1e3:.3f}", r.repeats, r.status) for r in rows]
    cells = [tuple(str(c) for c in head)] + [tuple(str(c) for c in row) for row in body]
    widths = [max(len(row[i]) for row in cells) for i in range(len(head))]
    lines = ["# FLOPs: multiply-add = 2, softmax = 5/element, other elementwise = 1/element",
             "# peak_bytes: live activation tensors during one forward pass (parameters excluded)"]
    for row in cells:
        lines.append("  ".join(c.rjust(w) if i >= 1 else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(asdict(r))
    return buf.getvalue()


def read_csv(text):
    casts = {f.name: f.type for f in fields(BenchRow)}
    conv = {"int": int, "float": float, "str": str}
    return [BenchRow(**{k: conv[casts[k]](v) for k, v in row.items()})
            for row in csv.DictReader(io.StringIO(text))]
