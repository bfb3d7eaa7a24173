"""Interaction ingest, k-core filtering, leave-one-out splits and padded batches."""
from __future__ import annotations

import csv
import hashlib
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

PAD = 0
FIELDS = ("user_id", "item_id", "timestamp")


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: float


@dataclass
class Vocabulary:
    """Item id <-> index bijection; index 0 is reserved for padding."""

    item_ids: list[str]
    frequencies: np.ndarray = None
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {item: i + 1 for i, item in enumerate(self.item_ids)}
        if len(self.index) != len(self.item_ids):
            raise ValueError("duplicate item ids in vocabulary")
        if self.frequencies is None:
            self.frequencies = np.zeros(len(self.item_ids) + 1, dtype=np.int64)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def encode(self, item: str) -> int:
        return self.index[item]

    def decode(self, idx: int) -> str:
        if idx == PAD:
            raise KeyError("padding index has no item id")
        return self.item_ids[idx - 1]


@dataclass(frozen=True)
class UserSequence:
    user: str
    items: tuple[int, ...]


@dataclass
class SplitDataset:
    """Leave-one-out split: last item is test, second-to-last validation."""

    users: list[str]
    train: list[tuple[int, ...]]
    valid: list[int]
    test: list[int]
    vocab: Vocabulary
    max_len: int = 100

    def __len__(self) -> int:
        return len(self.users)

    def sequence(self, u: int) -> tuple[int, ...]:
        return self.train[u] + (self.valid[u], self.test[u])

    def history(self, u: int, split: str) -> tuple[int, ...]:
        """Context seen when predicting the target of ``split`` for user ``u``.

        ``train`` is the last training transition: prefix[:-1] -> prefix[-1].
        """
        if split == "train":
            return self.train[u][:-1]
        if split == "valid":
            return self.train[u]
        if split == "test":
            return self.train[u] + (self.valid[u],)
        if split == "full":
            return self.sequence(u)
        raise ValueError(f"unknown split {split!r}")

    def target(self, u: int, split: str) -> int:
        """Target index for ``split``; 0 when the user has no training transition."""
        if split == "train":
            return self.train[u][-1] if len(self.train[u]) >= 2 else PAD
        if split == "valid":
            return self.valid[u]
        if split == "test":
            return self.test[u]
        raise ValueError(f"split {split!r} has no target")

    def training_examples(self, sliding_window: bool = False) -> list[tuple[tuple[int, ...], int]]:
        """(history, target) pairs from the training prefixes.

        By default each user gives one example: prefix[:-1] -> prefix[-1].
        Users whose prefix has a single item contribute nothing.
        """
        out = []
        for prefix in self.train:
            if len(prefix) < 2:
                continue
            if sliding_window:
                out.extend((prefix[:j], prefix[j]) for j in range(1, len(prefix)))
            else:
                out.append((prefix[:-1], prefix[-1]))
        return out


@dataclass
class Batch:
    items: np.ndarray  # (batch, N) int64, left padded
    targets: np.ndarray  # (batch,)
    mask: np.ndarray  # (batch, N) bool

    def __len__(self) -> int:
        return self.items.shape[0]


# -- loading -----------------------------------------------------------------


def _resolve_columns(header: list[str]) -> dict[str, int]:
    cols = {}
    for pos, raw in enumerate(header):
        name = raw.strip().split(":", 1)[0]
        for f in FIELDS:
            if f in name and f not in cols:
                cols[f] = pos
    missing = [f for f in FIELDS if f not in cols]
    if missing:
        raise SchemaError(f"header lacks column(s) {', '.join(missing)}: {header}")
    return cols


def load_interactions(path, format: str = "tsv-header") -> list[Interaction]:
    if format not in ("tsv-header", "csv"):
        raise ValueError(f"unknown format {format!r}")
    delimiter = "\t" if format == "tsv-header" else ","
    log = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, expected a header line")
        cols = _resolve_columns(header)
        width = max(cols.values()) + 1
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < width:
                raise RowError(lineno, f"expected at least {width} fields, got {len(row)}")
            user = row[cols["user_id"]].strip()
            item = row[cols["item_id"]].strip()
            if not user or not item:
                raise RowError(lineno, "empty user or item id")
            raw_ts = row[cols["timestamp"]].strip()
            try:
                ts = float(raw_ts)
            except ValueError:
                raise RowError(lineno, f"unparseable timestamp {raw_ts!r}") from None
            if not math.isfinite(ts):
                raise RowError(lineno, f"non-finite timestamp {raw_ts!r}")
            log.append(Interaction(user, item, ts))
    return log


# -- filtering and sequences -------------------------------------------------


def filter_k_core(log: list[Interaction], k: int = 5) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until none remain."""
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(log)
    while True:
        users = Counter(x.user for x in current)
        items = Counter(x.item for x in current)
        kept = [x for x in current if users[x.user] >= k and items[x.item] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def build_sequences(log: list[Interaction], vocab_min_len: int = 3):
    """Chronological per-user sequences; ties keep file order.

    Users appear in order of first interaction in the log, items are indexed
    in order of first appearance among the retained users.
    """
    per_user: dict[str, list[tuple[float, int, str]]] = defaultdict(list)
    for pos, x in enumerate(log):
        per_user[x.user].append((x.timestamp, pos, x.item))

    kept_users = []
    for user, events in per_user.items():
        if len(events) < vocab_min_len:
            continue
        events.sort(key=lambda e: (e[0], e[1]))
        kept_users.append((user, [e[2] for e in events]))

    first_seen: dict[str, int] = {}
    for pos, x in enumerate(log):
        first_seen.setdefault(x.item, pos)
    retained = {it for _, items in kept_users for it in items}
    item_ids = sorted(retained, key=first_seen.__getitem__)
    vocab = Vocabulary(item_ids)
    sequences = [
        UserSequence(user, tuple(vocab.encode(it) for it in items)) for user, items in kept_users
    ]
    return vocab, sequences


def split_leave_one_out(sequences: list[UserSequence], vocab: Vocabulary, max_len: int = 100) -> SplitDataset:
    """Split every sequence and fill the vocabulary's training frequencies."""
    users, train, valid, test = [], [], [], []
    freq = np.zeros(vocab.num_items + 1, dtype=np.int64)
    for seq in sequences:
        if len(seq.items) < 3:
            raise ValueError(f"user {seq.user!r} has fewer than 3 interactions")
        users.append(seq.user)
        train.append(tuple(seq.items[:-2]))
        valid.append(seq.items[-2])
        test.append(seq.items[-1])
        np.add.at(freq, np.asarray(seq.items[:-2], dtype=np.int64), 1)
    vocab = Vocabulary(list(vocab.item_ids), frequencies=freq)
    return SplitDataset(users, train, valid, test, vocab, max_len)


# -- batching ----------------------------------------------------------------


def truncate_pad(items, N: int = 100) -> tuple[np.ndarray, np.ndarray]:
    items = list(items)
    if not items:
        raise ValueError("cannot pad an empty history")
    items = items[-N:]
    row = np.zeros(N, dtype=np.int64)
    row[N - len(items):] = items
    return row, row != PAD


def pad_histories(histories, N: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.zeros((len(histories), N), dtype=np.int64)
    for r, h in enumerate(histories):
        rows[r], _ = truncate_pad(h, N)
    return rows, rows != PAD


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(
    examples: list[tuple[tuple[int, ...], int]],
    batch_size: int = 1024,
    shuffle: bool = True,
    seed: int = 0,
    epoch: int = 0,
    max_len: int = 100,
) -> Iterator[Batch]:
    """Yield padded batches covering every example once; order depends on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(examples), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        items, mask = pad_histories([h for h, _ in chunk], max_len)
        targets = np.array([t for _, t in chunk], dtype=np.int64)
        yield Batch(items, targets, mask)


# -- bundle io ---------------------------------------------------------------


def bundle_texts(dataset: SplitDataset) -> dict[str, str]:
    """File name -> exact contents of the serialized bundle."""
    vocab = "".join(
        f"{item}\t{idx}\t{int(dataset.vocab.frequencies[idx])}\n"
        for idx, item in enumerate(dataset.vocab.item_ids, start=1)
    )
    seqs = "".join(
        f"{user}\t{' '.join(map(str, dataset.sequence(u)))}\n" for u, user in enumerate(dataset.users)
    )
    return {"vocab.tsv": vocab, "sequences.tsv": seqs}


def save_bundle(dataset: SplitDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in bundle_texts(dataset).items():
        (directory / name).write_bytes(text.encode("utf-8"))
    return directory


def dataset_digest(dataset: SplitDataset) -> str:
    h = hashlib.sha256()
    for name, text in bundle_texts(dataset).items():
        h.update(name.encode())
        h.update(text.encode("utf-8"))
    return h.hexdigest()


def load_bundle(directory, max_len: int = 100) -> SplitDataset:
    directory = Path(directory)
    item_ids, freqs = [], [0]
    with open(directory / "vocab.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            item, idx, freq = line.rstrip("\n").split("\t")
            if int(idx) != lineno:
                raise SchemaError(f"vocab.tsv line {lineno}: index {idx} out of order")
            item_ids.append(item)
            freqs.append(int(freq))
    vocab = Vocabulary(item_ids, frequencies=np.array(freqs, dtype=np.int64))
    sequences = []
    with open(directory / "sequences.tsv", encoding="utf-8") as fh:
        for line in fh:
            user, items = line.rstrip("\n").split("\t")
            sequences.append(UserSequence(user, tuple(int(i) for i in items.split())))
    return split_leave_one_out(sequences, vocab, max_len)


def bundle_digest(directory) -> str:
    """Digest of the files on disk; equals :func:`dataset_digest` of the loaded bundle."""
    h = hashlib.sha256()
    for name in ("vocab.tsv", "sequences.tsv"):
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


def dataset_stats(dataset: SplitDataset) -> dict:
    users = len(dataset)
    items = dataset.vocab.num_items
    lengths = [len(dataset.sequence(u)) for u in range(users)]
    interactions = int(sum(lengths))
    return {
        "users": users,
        "items": items,
        "interactions": interactions,
        "density": interactions / (users * items) if users and items else 0.0,
        "mean_length": interactions / users if users else 0.0,
    }


def prepare(path, format: str = "tsv-header", k: int = 5, max_len: int = 100) -> SplitDataset:
    log = filter_k_core(load_interactions(path, format), k)
    vocab, sequences = build_sequences(log)
    return split_leave_one_out(sequences, vocab, max_len)


def infer_format(path) -> str:
    return "csv" if os.fspath(path).lower().endswith(".csv") else "tsv-header"
