"""Reference self-attention and the linear dispatcher attention (LDA) block.

Shapes follow the convention ``(..., tokens, d)``: every function accepts a
single sequence ``(N, d)`` or a batch ``(B, N, d)``.  Padding is handled with a
boolean ``key_mask`` (True marks a padded key) that removes those keys from the
softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError

MASK_VALUE = -1e30


def _named(prefix, name):
    return f"{prefix}.{name}" if prefix else name


@dataclass
class AttentionParams:
    """One (W_Q, W_K, W_V) triple, all d x d."""

    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor

    def __post_init__(self):
        d = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (d, d):
                raise DimensionError(f"attention projections must be square d x d, got {w.shape}")

    @classmethod
    def init(cls, d, seed, prefix=""):
        return cls(*(T.normal_init((d, d), seed, _named(prefix, n)) for n in ("w_q", "w_k", "w_v")))

    @property
    def d(self):
        return self.w_q.shape[0]

    def parameters(self, prefix=""):
        yield _named(prefix, "w_q"), self.w_q
        yield _named(prefix, "w_k"), self.w_k
        yield _named(prefix, "w_v"), self.w_v


@dataclass
class NormParams:
    gamma: T.Tensor
    beta: T.Tensor

    @classmethod
    def init(cls, d, prefix=""):
        return cls(T.parameter(np.ones(d), name=_named(prefix, "gamma")),
                   T.parameter(np.zeros(d), name=_named(prefix, "beta")))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)

    def parameters(self, prefix=""):
        yield _named(prefix, "gamma"), self.gamma
        yield _named(prefix, "beta"), self.beta


@dataclass
class FeedForwardParams:
    """Two-layer GELU MLP d -> hidden -> d."""

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    @classmethod
    def init(cls, d, seed, prefix="", mult=2):
        h = mult * d
        return cls(
            T.normal_init((d, h), seed, _named(prefix, "w1")),
            T.parameter(np.zeros(h), name=_named(prefix, "b1")),
            T.normal_init((h, d), seed, _named(prefix, "w2")),
            T.parameter(np.zeros(d), name=_named(prefix, "b2")),
        )

    def __call__(self, x):
        return T.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self, prefix=""):
        for n in ("w1", "b1", "w2", "b2"):
            yield _named(prefix, n), getattr(self, n)


def _identity(x):
    return x


def _key_mask(mask, ndim):
    """Reshape a (..., n_keys) padding mask to broadcast against (..., m, n_keys) scores."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    mask = np.expand_dims(mask, -2)
    while mask.ndim < ndim:
        mask = mask[None]
    return mask


def attend(q, k, v, key_mask=None, return_weights=False):
    """Softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attend: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(q.shape[-1]))
    mask = _key_mask(key_mask, scores.ndim)
    if mask is not None:
        scores = T.masked_fill(scores, np.broadcast_to(mask, scores.shape), MASK_VALUE)
    weights = T.softmax(scores, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def _check_tokens(x, d, what):
    if x.ndim < 2 or x.shape[-1] != d:
        raise DimensionError(f"{what}: expected (..., n, {d}), got {x.shape}")


def self_attention(x, params, key_mask=None, return_weights=False):
    """Quadratic baseline: every token attends to every token."""
    _check_tokens(x, params.d, "self_attention")
    return attend(x @ params.w_q, x @ params.w_k, x @ params.w_v, key_mask, return_weights)


def lda_aggregate(p, x, params, key_mask=None, return_weights=False):
    """Interest tokens ``p`` (k x d) gather from sequence tokens ``x`` (N x d); cost O(Nk)."""
    _check_tokens(p, params.d, "lda_aggregate")
    _check_tokens(x, params.d, "lda_aggregate")
    return attend(p @ params.w_q, x @ params.w_k, x @ params.w_v, key_mask, return_weights)


def lda_dispatch(x, p_next, params, return_weights=False):
    """Sequence tokens query the aggregated interest tokens; cost O(Nk)."""
    _check_tokens(x, params.d, "lda_dispatch")
    _check_tokens(p_next, params.d, "lda_dispatch")
    return attend(x @ params.w_q, p_next @ params.w_k, p_next @ params.w_v, None, return_weights)


_LDA_NORMS = ("norm_x", "norm_p", "norm_p_dispatch", "norm_x_ffn", "norm_p_ffn")


@dataclass
class LdaLayerParams:
    aggregate: AttentionParams
    dispatch: AttentionParams
    ffn_x: FeedForwardParams
    ffn_p: FeedForwardParams
    norms: dict = field(default_factory=dict)

    @classmethod
    def init(cls, d, seed, prefix="", use_norm=True, ffn_mult=2):
        norms = {n: NormParams.init(d, _named(prefix, n)) for n in _LDA_NORMS} if use_norm else {}
        return cls(
            AttentionParams.init(d, seed, _named(prefix, "aggregate")),
            AttentionParams.init(d, seed, _named(prefix, "dispatch")),
            FeedForwardParams.init(d, seed, _named(prefix, "ffn_x"), ffn_mult),
            FeedForwardParams.init(d, seed, _named(prefix, "ffn_p"), ffn_mult),
            norms,
        )

    def norm(self, name):
        return self.norms.get(name, _identity)

    def parameters(self, prefix=""):
        yield from self.aggregate.parameters(_named(prefix, "aggregate"))
        yield from self.dispatch.parameters(_named(prefix, "dispatch"))
        yield from self.ffn_x.parameters(_named(prefix, "ffn_x"))
        yield from self.ffn_p.parameters(_named(prefix, "ffn_p"))
        for n in _LDA_NORMS:
            if n in self.norms:
                yield from self.norms[n].parameters(_named(prefix, n))


def lda_layer(x, p, params, key_mask=None):
    """One LDA layer: aggregate, dispatch, then a residual FFN on each stream.

    Returns ``(x_out, p_out)`` with the shapes of ``(x, p)``.
    """
    xn = params.norm("norm_x")(x)
    p_next = p + lda_aggregate(params.norm("norm_p")(p), xn, params.aggregate, key_mask)
    x_next = x + lda_dispatch(xn, params.norm("norm_p_dispatch")(p_next), params.dispatch)
    x_out = x_next + params.ffn_x(params.norm("norm_x_ffn")(x_next))
    p_out = p_next + params.ffn_p(params.norm("norm_p_ffn")(p_next))
    return x_out, p_out


@dataclass
class LdaStack:
    layers: list

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ContractError("an LDA stack needs at least one layer")

    @classmethod
    def init(cls, d, n_layers, seed, prefix="lda", use_norm=True, ffn_mult=2):
        return cls([LdaLayerParams.init(d, seed, f"{prefix}.{i}", use_norm, ffn_mult)
                    for i in range(n_layers)])

    @property
    def depth(self):
        return len(self.layers)

    def parameters(self, prefix="lda"):
        for i, layer in enumerate(self.layers):
            yield from layer.parameters(f"{prefix}.{i}")


def lda_stack_forward(x0, p0, stack, key_mask=None, return_interests=False):
    """Thread (x, p) through every layer; the interest stream feeds the next layer."""
    x, p = x0, p0
    for layer in stack.layers:
        x, p = lda_layer(x, p, layer, key_mask)
    return (x, p) if return_interests else x


_SA_NORMS = ("norm_attn", "norm_ffn")


@dataclass
class SelfAttentionLayerParams:
    """Pre-norm transformer layer using full self-attention (the quadratic baseline)."""

    attn: AttentionParams
    ffn: FeedForwardParams
    norms: dict = field(default_factory=dict)

    @classmethod
    def init(cls, d, seed, prefix="", use_norm=True, ffn_mult=2):
        norms = {n: NormParams.init(d, _named(prefix, n)) for n in _SA_NORMS} if use_norm else {}
        return cls(AttentionParams.init(d, seed, _named(prefix, "attn")),
                   FeedForwardParams.init(d, seed, _named(prefix, "ffn"), ffn_mult), norms)

    def norm(self, name):
        return self.norms.get(name, _identity)

    def parameters(self, prefix=""):
        yield from self.attn.parameters(_named(prefix, "attn"))
        yield from self.ffn.parameters(_named(prefix, "ffn"))
        for n in _SA_NORMS:
            if n in self.norms:
                yield from self.norms[n].parameters(_named(prefix, n))


def self_attention_layer(x, params, key_mask=None):
    x = x + self_attention(params.norm("norm_attn")(x), params.attn, key_mask)
    return x + params.ffn(params.norm("norm_ffn")(x))
