"""Ranking metrics, segment breakdowns and the paired Student t-test."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_KS = (5, 10, 20)


def hit_rate_at_k(rank: int, k: int) -> int:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item: 1 / log2(rank + 1) inside the cut-off, else 0."""
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target under descending score, ties to the lower index.

    ``scores`` is (batch, |I| + 1) with column 0 the padding slot, which is
    never counted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(scores.shape[0])
    t = scores[rows, targets][:, None]
    real = scores[:, 1:]
    idx = np.arange(1, scores.shape[1])[None, :]
    better = (real > t) | ((real == t) & (idx < targets[:, None]))
    return 1 + better.sum(axis=1)


def metrics_from_ranks(ranks, ks=DEFAULT_KS) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.int64)
    out = {}
    for k in ks:
        if len(ranks) == 0:
            out[f"HR@{k}"] = 0.0
            out[f"NDCG@{k}"] = 0.0
            continue
        hit = ranks <= k
        out[f"HR@{k}"] = float(hit.mean())
        out[f"NDCG@{k}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return out


# -- segments ----------------------------------------------------------------


def segment_head_tail(frequencies, head_fraction: float = 0.2) -> dict[int, str]:
    """Label the most frequent ceil(0.2 |I|) items as head, the rest as tail.

    ``frequencies`` is indexed by item index with slot 0 for padding.  Equal
    frequencies are ordered by ascending item index.
    """
    freq = np.asarray(frequencies)[1:]
    n = freq.shape[0]
    order = np.lexsort((np.arange(n), -freq))
    n_head = math.ceil(round(head_fraction * n, 9))
    labels = {}
    for pos, i in enumerate(order):
        labels[int(i) + 1] = "head" if pos < n_head else "tail"
    return labels


def segment_by_length(lengths, groups: int = 5) -> list[int]:
    """Count-balanced quantile buckets of users by sequence length.

    Returns a group index per user (0 = shortest).  Bucket sizes differ by at
    most one; equal lengths keep user order.
    """
    if groups < 2:
        raise ValueError("groups must be >= 2")
    lengths = list(lengths)
    n = len(lengths)
    if n < groups:
        raise ValueError(f"need at least {groups} users, got {n}")
    order = sorted(range(n), key=lambda u: (lengths[u], u))
    out = [0] * n
    for pos, u in enumerate(order):
        out[u] = pos * groups // n
    return out


# -- evaluation driver -------------------------------------------------------


@dataclass
class MetricReport:
    split: str
    metrics: dict[str, float]
    count: int
    skipped: int = 0
    segments: dict[str, dict] | None = None
    config: dict | None = None

    def to_dict(self) -> dict:
        out = {
            self.split: self.metrics,
            "counts": {self.split: self.count, "skipped": self.skipped},
        }
        if self.segments is not None:
            out["segments"] = self.segments
        if self.config is not None:
            out["config"] = self.config
        return out


def evaluate(model, dataset, split: str = "test", ks=DEFAULT_KS, batch_size: int = 256,
             segments: bool = False, users=None) -> MetricReport:
    """Rank every target against the full catalog.

    ``model`` is anything with ``score(histories) -> ndarray (batch, |I| + 1)``
    where higher is better and column 0 is ignored.
    """
    num_items = dataset.vocab.num_items
    users = range(len(dataset)) if users is None else users
    kept, skipped = [], 0
    for u in users:
        t = dataset.target(u, split)
        if 1 <= t <= num_items:
            kept.append(u)
        else:
            skipped += 1
    ranks = np.zeros(len(kept), dtype=np.int64)
    for start in range(0, len(kept), batch_size):
        chunk = kept[start:start + batch_size]
        scores = model.score([dataset.history(u, split) for u in chunk])
        targets = np.array([dataset.target(u, split) for u in chunk])
        ranks[start:start + len(chunk)] = target_ranks(scores, targets)

    report = MetricReport(split, metrics_from_ranks(ranks, ks), len(kept), skipped)
    if segments:
        report.segments = segment_metrics(dataset, split, kept, ranks, ks)
    return report


def segment_metrics(dataset, split, users, ranks, ks=DEFAULT_KS) -> dict[str, dict]:
    ranks = np.asarray(ranks)
    labels = segment_head_tail(dataset.vocab.frequencies)
    targets = np.array([dataset.target(u, split) for u in users])
    out = {}
    for name in ("head", "tail"):
        sel = np.array([labels[int(t)] == name for t in targets], dtype=bool)
        out[name] = {**metrics_from_ranks(ranks[sel], ks), "count": int(sel.sum())}
    lengths = [len(dataset.sequence(u)) for u in users]
    groups = segment_by_length(lengths) if len(users) >= 5 else [0] * len(users)
    groups = np.asarray(groups)
    for g in range(5):
        sel = groups == g
        out[f"length_q{g + 1}"] = {**metrics_from_ranks(ranks[sel], ks), "count": int(sel.sum())}
    return out


# -- paired t-test -----------------------------------------------------------


class ZeroVarianceError(ValueError):
    pass


@dataclass
class TTestResult:
    t_statistic: float
    p_value: float
    mean_difference: float
    degrees_of_freedom: int

    def to_dict(self) -> dict:
        return asdict(self)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, max(0.0, regularized_incomplete_beta(df / 2.0, 0.5, x)))


def paired_t_test(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least two pairs")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        raise ZeroVarianceError("zero variance in paired differences")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_two_sided_p(t, n - 1), mean, n - 1)
