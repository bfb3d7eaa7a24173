"""Deterministic toy datasets for smoke tests and the acceptance suite."""
from __future__ import annotations

import numpy as np

from .data import UserSequence, Vocabulary, split_leave_one_out


def copy_pattern_dataset(users: int = 200, items: int = 50, min_len: int = 8, max_len: int = 16,
                         seed: int = 0, max_seq: int = 20):
    """Sequences where the next item is a fixed permutation of the last one."""
    rng = np.random.default_rng(seed)
    successor = rng.permutation(items) + 1
    sequences = []
    for u in range(users):
        n = int(rng.integers(min_len, max_len + 1))
        seq = [int(rng.integers(1, items + 1))]
        while len(seq) < n:
            seq.append(int(successor[seq[-1] - 1]))
        sequences.append(UserSequence(f"u{u}", tuple(seq)))
    vocab = Vocabulary([f"i{i}" for i in range(1, items + 1)])
    return split_leave_one_out(sequences, vocab, max_seq)


def copy_pattern_interactions(users: int = 200, items: int = 50, seed: int = 0, **kw) -> str:
    """The same dataset rendered as an interaction TSV (header included)."""
    ds = copy_pattern_dataset(users, items, seed=seed, **kw)
    lines = ["user_id:token\titem_id:token\ttimestamp:float"]
    for u, user in enumerate(ds.users):
        for t, idx in enumerate(ds.sequence(u)):
            lines.append(f"{user}\t{ds.vocab.decode(idx)}\t{1000 + t}")
    return "\n".join(lines) + "\n"
