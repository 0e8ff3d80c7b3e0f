"""Interest memory retrieval: hierarchical query network plus product-key lookup.

An expert bank of ``K = n_keys ** 2`` rows is addressed by keys built as the
Cartesian product of two sub-key sets (``n_keys`` rows of width ``d / 2``
each).  Expert ``i`` owns the key ``concat(c[i // n_keys], c_prime[i % n_keys])``.

Ties between equal scores always resolve towards the lower expert id, in both
the product-key search and the brute-force oracle, so the two agree exactly.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .attention import AttentionParams, self_attention
from .errors import ContractError, DimensionError


@dataclass
class SubKeySets:
    c_keys: T.Tensor
    c_prime_keys: T.Tensor

    def __post_init__(self):
        if self.c_keys.shape != self.c_prime_keys.shape:
            raise DimensionError(f"sub-key sets differ: {self.c_keys.shape} vs {self.c_prime_keys.shape}")

    @classmethod
    def init(cls, n_keys, d, seed, prefix="imr"):
        if d % 2:
            raise ContractError(f"model dimension must be even for product keys, got {d}")
        return cls(T.normal_init((n_keys, d // 2), seed, f"{prefix}.c_keys"),
                   T.normal_init((n_keys, d // 2), seed, f"{prefix}.c_prime_keys"))

    @property
    def n_keys(self):
        return self.c_keys.shape[0]

    @property
    def d(self):
        return 2 * self.c_keys.shape[1]

    def full_keys(self):
        """All K concatenated keys as a (K, d) array, row ``i * n_keys + j``."""
        n = self.n_keys
        c, cp = self.c_keys.data, self.c_prime_keys.data
        return np.concatenate([np.repeat(c, n, axis=0), np.tile(cp, (n, 1))], axis=1)

    def parameters(self, prefix="imr"):
        yield f"{prefix}.c_keys", self.c_keys
        yield f"{prefix}.c_prime_keys", self.c_prime_keys


@dataclass
class ExpertBank:
    experts: T.Tensor

    @classmethod
    def init(cls, n_keys, d, seed, prefix="imr"):
        return cls(T.normal_init((n_keys * n_keys, d), seed, f"{prefix}.experts"))

    @property
    def size(self):
        return self.experts.shape[0]

    def parameters(self, prefix="imr"):
        yield f"{prefix}.experts", self.experts


@dataclass
class QueryStage:
    proj_w: T.Tensor
    proj_b: T.Tensor
    attn: AttentionParams


@dataclass
class QueryNetworkParams:
    stride: int
    stages: list

    @classmethod
    def init(cls, seq_len, d, stride, seed, prefix="imr.query"):
        stages = []
        for i in range(count_query_stages(seq_len, stride)):
            name = f"{prefix}.{i}"
            stages.append(QueryStage(
                T.normal_init((stride * d, d), seed, f"{name}.proj_w"),
                T.parameter(np.zeros(d), name=f"{name}.proj_b"),
                AttentionParams.init(d, seed, f"{name}.attn"),
            ))
        return cls(stride, stages)

    def parameters(self, prefix="imr.query"):
        for i, st in enumerate(self.stages):
            yield f"{prefix}.{i}.proj_w", st.proj_w
            yield f"{prefix}.{i}.proj_b", st.proj_b
            yield from st.attn.parameters(f"{prefix}.{i}.attn")


def count_query_stages(seq_len, stride):
    """Number of reshape/project/attend stages before the length drops below ``stride``."""
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    if stride == 1:
        return 1
    n, stages = seq_len, 0
    while n >= stride:
        if n % stride:
            raise ContractError(f"sequence length {n} not divisible by stride {stride}")
        n //= stride
        stages += 1
    return max(stages, 0)


def _as_batch(x):
    """Promote (N, d) to (1, N, d); returns (tensor, was_single)."""
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected (N, d) or (B, N, d), got {x.shape}")
    return x, False


def masked_mean_pool(x, pad_mask=None):
    """Mean over non-padded tokens: (B, N, d) -> (B, 1, d)."""
    if pad_mask is None:
        return T.mean(x, axis=1, keepdims=True)
    keep = (~np.asarray(pad_mask, dtype=bool)).astype(np.float64)
    counts = np.maximum(keep.sum(axis=1), 1.0)
    w = (keep / counts[:, None])[..., None]
    return T.sum(T.mul(x, w), axis=1, keepdims=True)


def query_network(x, params, pad_mask=None, masking=True):
    """Shrink a sequence to one query vector by repeated reshape, projection and self-attention.

    ``x`` is (N, d) or (B, N, d); the result is (1, d) or (B, 1, d).  With
    ``masking`` on, padded positions are zeroed before every stage and excluded
    from attention keys and the final pooling, so their content cannot leak
    into the query.
    """
    x, single = _as_batch(x)
    b, n, d = x.shape
    stride = params.stride
    valid = np.ones((b, n), dtype=bool)
    if masking and pad_mask is not None:
        valid = ~np.asarray(pad_mask, dtype=bool).reshape(b, n)
        x = T.mul(x, valid[..., None].astype(np.float64))
    for stage in params.stages:
        n = x.shape[1]
        if n % stride:
            raise ContractError(f"query network: length {n} not divisible by stride {stride}")
        x = T.reshape(x, (b, n // stride, stride * d))
        x = x @ stage.proj_w + stage.proj_b
        valid = valid.reshape(b, n // stride, stride).any(axis=2)
        x = self_attention(x, stage.attn, key_mask=~valid)
        if masking:
            x = T.mul(x, valid[..., None].astype(np.float64))
    q = masked_mean_pool(x, ~valid)
    return T.reshape(q, (1, d)) if single else q


@dataclass
class RetrievalResult:
    indices: np.ndarray
    scores: np.ndarray
    experts: np.ndarray


def _query_array(q, d):
    arr = q.data if isinstance(q, T.Tensor) else np.asarray(q, dtype=np.float64)
    if arr.size != d:
        raise DimensionError(f"query must hold {d} values, got shape {arr.shape}")
    return arr.reshape(1, d)


def retrieve_bruteforce(q, bank, sub, k):
    """Exact top-k over all K concatenated keys (the O(Kd) reference)."""
    if not 1 <= k <= bank.size:
        raise ContractError(f"k={k} must lie in [1, K={bank.size}]")
    qa = _query_array(q, sub.d)[0]
    keys = sub.full_keys()
    scores = keys @ qa
    T.add_flops(2 * keys.size)
    order = np.argsort(-scores, kind="stable")[:k]
    return RetrievalResult(order.astype(np.int64), scores[order], bank.experts.data[order].copy())


def product_key_search(queries, sub, k):
    """Batched product-key top-k: (B, d) queries -> (indices, scores), each (B, k)."""
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != sub.d:
        raise DimensionError(f"queries must be (B, {sub.d}), got {queries.shape}")
    if not 1 <= k <= sub.n_keys:
        raise ContractError(f"k={k} must lie in [1, sqrt(K)={sub.n_keys}] for product-key search")
    # sub-key scoring over both halves plus full-width rescoring of k*k candidates
    T.add_flops(queries.shape[0] * (2 * sub.n_keys * sub.d + 2 * k * k * sub.d))
    return kernels.product_key_topk(queries, sub.c_keys.data, sub.c_prime_keys.data, k)


def retrieve_product_keys(q, bank, sub, k):
    """Top-k via two sub-key searches and k*k Cartesian recombinations, O((sqrt(K) + k^2) d)."""
    idx, scores = product_key_search(_query_array(q, sub.d), sub, k)
    return RetrievalResult(idx[0], scores[0], bank.experts.data[idx[0]].copy())


@dataclass
class InterestMemory:
    """Query network, sub-keys and expert bank wired together."""

    k: int
    sub: SubKeySets
    bank: ExpertBank
    query_net: QueryNetworkParams | None = None
    score_weighting: bool = False
    masking: bool = True

    @classmethod
    def init(cls, seq_len, d, n_keys, k, stride, seed, use_query_net=True,
             score_weighting=False, masking=True):
        qn = QueryNetworkParams.init(seq_len, d, stride, seed) if use_query_net else None
        return cls(k, SubKeySets.init(n_keys, d, seed), ExpertBank.init(n_keys, d, seed),
                   qn, score_weighting, masking)

    def parameters(self):
        if self.query_net is not None:
            yield from self.query_net.parameters()
        yield from self.sub.parameters()
        yield from self.bank.parameters()

    def query(self, x, pad_mask=None):
        if self.query_net is None:
            xb, single = _as_batch(x)
            q = masked_mean_pool(xb, pad_mask if self.masking else None)
            return T.reshape(q, (1, x.shape[-1])) if single else q
        return query_network(x, self.query_net, pad_mask, self.masking)

    def forward(self, x, pad_mask=None):
        """Return ``(p0, indices, scores)``: p0 is (B, k, d) gathered experts."""
        x, single = _as_batch(x)
        b, _, d = x.shape
        q = self.query(x, pad_mask)  # (B, 1, d)
        idx, scores = product_key_search(q.data.reshape(b, d), self.sub, self.k)
        p0 = T.index(self.bank.experts, idx)  # (B, k, d)
        if self.score_weighting:
            n = self.sub.n_keys
            keys = T.concat([T.index(self.sub.c_keys, idx // n),
                             T.index(self.sub.c_prime_keys, idx % n)], axis=2)
            live = T.reshape(keys @ T.transpose(q), (b, self.k, 1))
            w = T.scale(T.softmax(live, axis=1), float(self.k))
            p0 = T.mul(p0, w)
        if single:
            p0 = T.reshape(p0, (self.k, d))
            return p0, idx[0], scores[0]
        return p0, idx, scores


def imr_forward(x, memory, pad_mask=None):
    """Run interest retrieval; returns ``(p0, RetrievalResult or list of them)``."""
    p0, idx, scores = memory.forward(x, pad_mask)
    experts = memory.bank.experts.data
    if idx.ndim == 1:
        return p0, RetrievalResult(idx, scores, experts[idx].copy())
    return p0, [RetrievalResult(i, s, experts[i].copy()) for i, s in zip(idx, scores)]


@dataclass
class UsageStats:
    """Per-expert load (selection count) and traffic (softmax score mass)."""

    num_experts: int
    load: np.ndarray = field(default=None)
    traffic: np.ndarray = field(default=None)
    queries: int = 0

    def __post_init__(self):
        if self.load is None:
            self.load = np.zeros(self.num_experts, dtype=np.int64)
        if self.traffic is None:
            self.traffic = np.zeros(self.num_experts, dtype=np.float64)

    def add(self, indices, scores):
        indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        if indices.size and (indices.min() < 0 or indices.max() >= self.num_experts):
            raise ContractError("expert index outside the bank")
        np.add.at(self.load, indices.ravel(), 1)
        z = np.exp(scores - scores.max(axis=1, keepdims=True))
        np.add.at(self.traffic, indices.ravel(), (z / z.sum(axis=1, keepdims=True)).ravel())
        self.queries += indices.shape[0]

    @property
    def usage_rate(self):
        return float((self.load > 0).sum()) / self.num_experts

    def table(self):
        """Rows ``(expert_id, load, traffic, cumulative_fraction)`` sorted by load, descending."""
        order = np.lexsort((np.arange(self.num_experts), -self.load))
        total = max(int(self.load.sum()), 1)
        cum = np.cumsum(self.load[order]) / total
        return [(int(i), int(self.load[i]), float(self.traffic[i]), float(c))
                for i, c in zip(order, cum)]

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"# queries={self.queries} experts={self.num_experts} "
                  f"key_usage_rate={self.usage_rate:.6f}\n")
        buf.write("expert_id\tload\ttraffic\tcumulative_fraction\n")
        for eid, load, traffic, cum in self.table():
            buf.write(f"{eid}\t{load}\t{traffic:.6f}\t{cum:.6f}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
        stats = cls(int(header["experts"]))
        stats.queries = int(header["queries"])
        for ln in lines[2:]:
            eid, load, traffic, _ = ln.split("\t")
            stats.load[int(eid)] = int(load)
            stats.traffic[int(eid)] = float(traffic)
        return stats


def record_usage(results, num_experts):
    """Aggregate a stream of :class:`RetrievalResult` into :class:`UsageStats`."""
    stats = UsageStats(num_experts)
    for r in results:
        stats.add(r.indices, r.scores)
    return stats


def perfect_square_root(value):
    root = math.isqrt(int(value))
    if root * root != value:
        raise ContractError(f"pool size {value} is not a perfect square")
    return root
