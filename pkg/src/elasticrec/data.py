"""Interaction-log ingestion, k-core preprocessing, leave-one-out views and synthetic data."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, FormatError

COLUMN_ALIASES = {
    "user": ("user_id", "userid", "user", "uid", "userId"),
    "item": ("item_id", "itemid", "item", "iid", "movie_id", "movieid", "movieId"),
    "timestamp": ("timestamp", "time", "ts", "datetime", "date"),
}
MAX_MALFORMED_FRACTION = 0.01


@dataclass
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    malformed: list = field(default_factory=list)

    def __len__(self):
        return len(self.users)


def _detect_format(first_line):
    if "::" in first_line:
        return "ml1m"
    if "\t" in first_line:
        return "tsv"
    return "csv"


def _finish(records, malformed, total, path):
    if total == 0 or not records:
        raise FormatError(f"{path}: no interaction records found", samples=malformed[:5])
    if len(malformed) > MAX_MALFORMED_FRACTION * total:
        raise FormatError(
            f"{path}: {len(malformed)} of {total} lines malformed "
            f"(limit {MAX_MALFORMED_FRACTION:.0%})", samples=malformed[:5])
    arr = np.array(records, dtype=np.float64)
    return InteractionLog(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], malformed)


def _parse_int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(text)
    return int(value)


def ingest(path, fmt="auto"):
    """Parse an interaction log.

    ``fmt`` is ``"ml1m"`` (``user::item::rating::timestamp``), ``"csv"``,
    ``"tsv"`` (header row naming the user/item/timestamp columns in any order)
    or ``"auto"``.  Malformed lines are collected as ``(line_number, text)``.
    """
    with open(path, encoding="utf-8", errors="replace") as fh:
        text = fh.read()
    lines = text.splitlines()
    first = next((ln for ln in lines if ln.strip()), "")
    if fmt == "auto":
        fmt = _detect_format(first)
    records, malformed, total = [], [], 0
    if fmt == "ml1m":
        for no, line in enumerate(lines, 1):
            if not line.strip():
                continue
            total += 1
            parts = line.strip().split("::")
            try:
                if len(parts) < 4:
                    raise ValueError(line)
                records.append((_parse_int(parts[0]), _parse_int(parts[1]), float(parts[3])))
            except ValueError:
                malformed.append((no, line))
        return _finish(records, malformed, total, path)
    if fmt not in ("csv", "tsv"):
        raise ContractError(f"unknown log format {fmt!r}")
    reader = csv.reader(io.StringIO(text), delimiter="\t" if fmt == "tsv" else ",")
    header = next(reader, None)
    if header is None:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in header]
    cols = {}
    for role, aliases in COLUMN_ALIASES.items():
        found = [i for i, h in enumerate(header) if h in aliases or h.lower() in aliases]
        if not found:
            raise FormatError(f"{path}: no {role} column in header {header}")
        cols[role] = found[0]
    for no, row in enumerate(reader, 2):
        if not row or not any(c.strip() for c in row):
            continue
        total += 1
        try:
            records.append((_parse_int(row[cols["user"]]), _parse_int(row[cols["item"]]),
                            float(row[cols["timestamp"]])))
        except (ValueError, IndexError):
            malformed.append((no, ",".join(row)))
    return _finish(records, malformed, total, path)


def filter_min_count(users, items, min_count=5):
    """Boolean keep-mask after iterating user/item count filtering to a fixpoint."""
    keep = np.ones(len(users), dtype=bool)
    while True:
        _, uinv, ucnt = np.unique(users[keep], return_inverse=True, return_counts=True)
        _, iinv, icnt = np.unique(items[keep], return_inverse=True, return_counts=True)
        ok = (ucnt[uinv] >= min_count) & (icnt[iinv] >= min_count)
        if ok.all():
            return keep
        idx = np.flatnonzero(keep)
        keep[idx[~ok]] = False


def pad_sequence(seq, max_len):
    """Most recent ``max_len`` items, left-padded with 0."""
    seq = np.asarray(seq, dtype=np.int64)[-max_len:]
    out = np.zeros(max_len, dtype=np.int64)
    if len(seq):
        out[max_len - len(seq):] = seq
    return out


def pad_batch(seqs, max_len):
    return np.stack([pad_sequence(s, max_len) for s in seqs]) if seqs else np.zeros((0, max_len), np.int64)


@dataclass
class SequenceDataset:
    """Chronological per-user sequences over dense item ids 1..num_items (0 is padding)."""

    sequences: list
    num_items: int
    item_ids: np.ndarray
    user_ids: np.ndarray
    max_len: int | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        if not self.sequences:
            raise DataError("dataset has no users")
        for s in self.sequences:
            if len(s) < 3:
                raise DataError("every user needs at least 3 interactions for leave-one-out")

    @property
    def num_users(self):
        return len(self.sequences)

    def split(self, name, max_len=None):
        """Padded ``(inputs, targets)`` for ``"valid"`` or ``"test"``.

        valid: history without the last two items -> second-to-last item.
        test: history without the last item -> last item.
        """
        max_len = max_len or self.max_len
        if max_len is None:
            raise ContractError("max_len required")
        cut = {"valid": 2, "test": 1}.get(name)
        if cut is None:
            raise ContractError(f"unknown split {name!r}")
        inputs = pad_batch([s[:-cut] for s in self.sequences], max_len)
        targets = np.array([s[-cut] for s in self.sequences], dtype=np.int64)
        return inputs, targets

    def training_examples(self, max_len=None, augment=True):
        """Next-item examples from each user's training part (all but the last two items).

        With ``augment`` every prefix predicts its successor; otherwise only the
        final training item is a target.
        """
        max_len = max_len or self.max_len
        inputs, targets = [], []
        for s in self.sequences:
            train = s[:-2]
            starts = range(1, len(train)) if augment else [len(train) - 1]
            for t in starts:
                inputs.append(train[:t])
                targets.append(train[t])
        if not targets:
            raise DataError("no training examples")
        return pad_batch(inputs, max_len), np.array(targets, dtype=np.int64)

    def save(self, path):
        """Write the dataset cache (an ``.npz`` container)."""
        lengths = np.array([len(s) for s in self.sequences], dtype=np.int64)
        np.savez(path, lengths=lengths, items=np.concatenate(self.sequences).astype(np.int64),
                 item_ids=self.item_ids, user_ids=self.user_ids,
                 num_items=np.array(self.num_items), max_len=np.array(self.max_len or 0))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            bounds = np.cumsum(z["lengths"])[:-1]
            seqs = [a.copy() for a in np.split(z["items"], bounds)]
            return cls(seqs, int(z["num_items"]), z["item_ids"], z["user_ids"],
                       int(z["max_len"]) or None)


def preprocess(log, min_count=5, max_len=None):
    """k-core filter, chronological grouping and dense re-indexing.

    Sequences are stored in full; ``max_len`` is kept as the default window
    for the padded views.
    """
    keep = filter_min_count(log.users, log.items, min_count)
    users, items, ts = log.users[keep], log.items[keep], log.timestamps[keep]
    if len(users) == 0:
        raise DataError(f"no interactions survive min_count={min_count} filtering")
    order = np.lexsort((items, ts, users))
    users, items = users[order], items[order]
    item_ids, dense = np.unique(items, return_inverse=True)
    dense = dense + 1
    user_ids, starts = np.unique(users, return_index=True)
    seqs = [a.astype(np.int64) for a in np.split(dense, starts[1:])]
    return SequenceDataset(seqs, len(item_ids), item_ids.astype(np.int64), user_ids.astype(np.int64), max_len)


def load_dataset(path, fmt="auto", min_count=5, max_len=None):
    """Read a cached ``.npz`` dataset or ingest and preprocess a raw log."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if str(path).endswith(".npz"):
        ds = SequenceDataset.load(path)
        if max_len:
            ds.max_len = max_len
        return ds
    return preprocess(ingest(path, fmt), min_count, max_len)


# ---------------------------------------------------------------------------
# synthetic data

def _successor(prev, n):
    return prev % n + 1


def synth_markov(num_users, num_items, seq_len, transition="successor", seed=0, noise=0.1):
    """Generate a synthetic dataset with a known next-item rule.

    ``transition`` is one of

    * ``"successor"``: next = prev + 1 (wrapping), fully predictable;
    * ``"uniform"``: every item drawn uniformly, nothing to learn;
    * ``"clusters"``: each user belongs to one of two latent groups that walk
      the catalogue forwards or backwards; with probability ``noise`` a step
      jumps to a random item, so the group must be read from the whole history;
    * a callable ``f(prev, rng) -> next`` over 1-based ids.
    """
    if num_users < 1 or num_items < 2 or seq_len < 3:
        raise ContractError("need num_users >= 1, num_items >= 2, seq_len >= 3")
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, 2, size=num_users)
    seqs = []
    for u in range(num_users):
        seq = np.empty(seq_len, dtype=np.int64)
        seq[0] = rng.integers(1, num_items + 1)
        for t in range(1, seq_len):
            prev = int(seq[t - 1])
            if transition == "successor":
                nxt = _successor(prev, num_items)
            elif transition == "uniform":
                nxt = int(rng.integers(1, num_items + 1))
            elif transition == "clusters":
                if rng.random() < noise:
                    nxt = int(rng.integers(1, num_items + 1))
                elif groups[u] == 0:
                    nxt = _successor(prev, num_items)
                else:
                    nxt = (prev - 2) % num_items + 1
            elif callable(transition):
                nxt = int(transition(prev, rng))
                if not 1 <= nxt <= num_items:
                    raise ContractError(f"transition produced item {nxt} outside 1..{num_items}")
            else:
                raise ContractError(f"unknown transition {transition!r}")
            seq[t] = nxt
        seqs.append(seq)
    ids = np.arange(1, num_items + 1, dtype=np.int64)
    return SequenceDataset(seqs, num_items, ids, np.arange(num_users, dtype=np.int64), seq_len,
                           groups if transition == "clusters" else None)
