"""The full recommender: embeddings, interest retrieval, LDA stack and item scoring."""
from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from . import tensor as T
from .attention import (
    LdaStack,
    NormParams,
    SelfAttentionLayerParams,
    lda_stack_forward,
    self_attention_layer,
)
from .config import ModelConfig
from .errors import ContractError, DataError
from .imr import InterestMemory

CHECKPOINT_VERSION = 1


class ElasticModel:
    """Parameter collection plus forward logic.

    Scores are returned for items ``1..num_items`` (column ``j`` is item
    ``j + 1``), so the padding id never competes for probability mass.
    """

    def __init__(self, config: ModelConfig, num_items: int, seed: int | None = None):
        config.validate()
        if num_items < 1:
            raise DataError("model needs at least one item")
        self.config = config
        self.num_items = int(num_items)
        self.seed = config.seed if seed is None else int(seed)
        d, s = config.d, self.seed
        self.item_emb = T.normal_init((num_items + 1, d), s, "item_emb")
        self.pos_emb = T.normal_init((config.max_len, d), s, "pos_emb")
        self.memory = None
        self.shared_p = None
        if config.use_dispatcher:
            if config.use_imr:
                self.memory = InterestMemory.init(
                    config.max_len, d, config.n_keys, config.k, config.stride, s,
                    use_query_net=config.use_query_net,
                    score_weighting=config.score_weighting, masking=config.query_masking)
            else:
                self.shared_p = T.normal_init((config.k, d), s, "shared_p")
            self.backbone = LdaStack.init(d, config.n_layers, s, "lda", config.use_norm, config.ffn_mult)
        else:
            self.backbone = [SelfAttentionLayerParams.init(d, s, f"sa.{i}", config.use_norm, config.ffn_mult)
                             for i in range(config.n_layers)]
        self.final_norm = NormParams.init(d, "final_norm") if config.use_norm else None
        self.last_retrieval = None

    def named_parameters(self):
        yield "item_emb", self.item_emb
        yield "pos_emb", self.pos_emb
        if self.memory is not None:
            yield from self.memory.parameters()
        if self.shared_p is not None:
            yield "shared_p", self.shared_p
        if self.config.use_dispatcher:
            yield from self.backbone.parameters("lda")
        else:
            for i, layer in enumerate(self.backbone):
                yield from layer.parameters(f"sa.{i}")
        if self.final_norm is not None:
            yield from self.final_norm.parameters("final_norm")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    # ------------------------------------------------------------------
    def _check_batch(self, seqs):
        seqs = np.asarray(seqs)
        single = seqs.ndim == 1
        seqs = np.atleast_2d(seqs)
        if seqs.ndim != 2 or seqs.shape[1] != self.config.max_len:
            raise ContractError(f"sequences must be padded to length {self.config.max_len}, got {seqs.shape}")
        if not np.issubdtype(seqs.dtype, np.integer):
            raise DataError("item ids must be integers")
        if seqs.min() < 0 or seqs.max() > self.num_items:
            raise DataError(f"unknown item id (valid range 0..{self.num_items})")
        return seqs.astype(np.int64), single

    def interests(self, x, pad):
        """Initial interest tokens (B, k, d) for embedded input ``x``."""
        b = x.shape[0]
        if self.memory is not None:
            p0, idx, scores = self.memory.forward(x, pad)
            self.last_retrieval = (idx, scores)
            return p0
        self.last_retrieval = None
        shared = T.reshape(self.shared_p, (1,) + self.shared_p.shape)
        return T.index(shared, np.zeros(b, dtype=np.int64))

    def encode(self, seqs):
        """Sequence representations X^L, shape (B, N, d)."""
        seqs, _ = self._check_batch(seqs)
        pad = seqs == 0
        x = T.index(self.item_emb, seqs) + self.pos_emb
        if self.config.use_dispatcher:
            p0 = self.interests(x, pad)
            return lda_stack_forward(x, p0, self.backbone, key_mask=pad)
        for layer in self.backbone:
            x = self_attention_layer(x, layer, key_mask=pad)
        return x

    def forward(self, seqs):
        """Scores against every item for left-padded ``seqs`` (B, N) or (N,)."""
        seqs, single = self._check_batch(seqs)
        h = self.encode(seqs)
        b, n, d = h.shape
        last = T.reshape(h[:, n - 1, :], (b, d))
        if self.final_norm is not None:
            last = self.final_norm(last)
        scores = last @ T.transpose(self.item_emb[1:])
        return T.reshape(scores, (self.num_items,)) if single else scores

    __call__ = forward

    def score_numpy(self, seqs, batch_size=512):
        """Inference-mode scores as a numpy array, batched."""
        seqs = np.atleast_2d(np.asarray(seqs))
        out = []
        with T.no_grad():
            for i in range(0, len(seqs), batch_size):
                out.append(self.forward(seqs[i:i + batch_size]).data)
        return np.concatenate(out, axis=0)

    # ------------------------------------------------------------------
    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def loss(scores, targets):
    """Cross-entropy of 1-based ``targets`` under the softmax of ``scores`` (B, num_items)."""
    scores = scores if scores.ndim == 2 else T.reshape(scores, (1, scores.shape[0]))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    return T.cross_entropy(scores, targets - 1)


def probabilities(scores):
    """Next-item distribution over the candidate set."""
    return T.softmax(scores, axis=-1)


# ----------------------------------------------------------------------
# checkpoint container: a zip of .npy members (readable by numpy.load) with
# fixed timestamps so identical models produce identical bytes.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_npz(path, arrays):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, _npy_bytes(arrays[name]))


def save_checkpoint(model, path, extra=None):
    """Config, seed, vocabulary size and every parameter tensor in one file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "num_items": model.num_items,
        "seed": model.seed,
        "parameters": [[n, list(p.shape)] for n, p in model.named_parameters()],
    }
    if extra:
        meta["extra"] = extra
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    write_npz(path, arrays)


def read_checkpoint_meta(path):
    with np.load(path, allow_pickle=False) as z:
        return json.loads(bytes(z["meta"]).decode())


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
        state = {n: z[f"param/{n}"] for n, _ in meta["parameters"]}
    model = ElasticModel(ModelConfig(**meta["config"]), meta["num_items"], meta["seed"])
    model.load_state_dict(state)
    return model
