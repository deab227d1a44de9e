"""Ranking metrics, repeat/non-repeat breakdowns and popularity baselines.

Metrics are averaged over prefix-target examples. Reciprocal ranks are
accumulated as exact fractions so that segment reports recombine into the
overall report without rounding error.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import Batch
from .data import batch as make_batches
from .errors import ContractError, EmptyDatasetError
from .model import forward

SEGMENTS = ("repeat", "non-repeat")


def rank(scores, k):
    """Top-``k`` item indices by descending score, ties by ascending index."""
    if k < 1:
        raise ContractError("k must be at least 1")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return [int(i) for i in order[:k]]


def mrr_at_k(ranked, target, k):
    for pos, item in enumerate(ranked[:k], start=1):
        if item == target:
            return 1.0 / pos
    return 0.0


def recall_at_k(ranked, target, k):
    return int(target in ranked[:k])


def target_ranks(scores, targets):
    """1-based rank of each row's target under the :func:`rank` ordering."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.intp)
    rows = np.arange(scores.shape[0])
    mine = scores[rows, targets][:, None]
    above = (scores > mine).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == mine) & (cols < targets[:, None])).sum(axis=1)
    return (1 + above + tied_before).astype(np.int64)


@dataclass
class MetricReport:
    ks: tuple
    count: int
    rr_sums: dict  # k -> Fraction, sum of reciprocal ranks within k
    hits: dict  # k -> int
    label: str = ""
    breakdown: dict = field(default_factory=dict)  # segment -> MetricReport

    def mrr(self, k):
        return float(self.rr_sums[k] / self.count) if self.count else 0.0

    def recall(self, k):
        return self.hits[k] / self.count if self.count else 0.0

    def exact_mrr(self, k):
        return self.rr_sums[k] / self.count

    def exact_recall(self, k):
        return Fraction(self.hits[k], self.count)

    @classmethod
    def from_ranks(cls, ranks, ks, label=""):
        ranks = [int(r) for r in ranks]
        rr = {k: sum((Fraction(1, r) for r in ranks if r <= k), Fraction(0)) for k in ks}
        hits = {k: sum(1 for r in ranks if r <= k) for k in ks}
        return cls(tuple(ks), len(ranks), rr, hits, label)

    def lines(self, split="test"):
        """``key=value`` text, one metric per line."""
        head = f"{self.label}." if self.label else ""
        out = [f"{head}{split}.count={self.count}"]
        for k in self.ks:
            out.append(f"{head}{split}.mrr@{k}={self.mrr(k):.6f}")
            out.append(f"{head}{split}.recall@{k}={self.recall(k):.6f}")
        for seg in SEGMENTS:
            sub = self.breakdown.get(seg)
            if sub is None:
                continue
            out.append(f"{head}{split}.{seg}.count={sub.count}")
            for k in self.ks:
                out.append(f"{head}{split}.{seg}.mrr@{k}={sub.mrr(k):.6f}")
                out.append(f"{head}{split}.{seg}.recall@{k}={sub.recall(k):.6f}")
        return out

    def records(self, split="test"):
        """One machine-readable record per (split, k, segment)."""
        out = []
        segments = [("all", self)] + [(s, self.breakdown[s]) for s in SEGMENTS if s in self.breakdown]
        for seg, rep in segments:
            for k in self.ks:
                out.append(
                    {
                        "label": self.label,
                        "split": split,
                        "k": k,
                        "segment": seg,
                        "count": rep.count,
                        "mrr": rep.mrr(k),
                        "recall": rep.recall(k),
                    }
                )
        return out


def report_from_ranks(ranks, is_repeat, ks=(10, 20), breakdown=False, label=""):
    ranks = np.asarray(ranks)
    is_repeat = np.asarray(is_repeat, dtype=bool)
    report = MetricReport.from_ranks(ranks, ks, label)
    if breakdown:
        report.breakdown = {
            "repeat": MetricReport.from_ranks(ranks[is_repeat], ks, label),
            "non-repeat": MetricReport.from_ranks(ranks[~is_repeat], ks, label),
        }
    return report


# -- scorers ----------------------------------------------------------------


class ModelScorer:
    """Scores batches with the mixed item distribution of a trained model."""

    def __init__(self, params, ablation="full"):
        self.params = params
        self.ablation = ablation

    @property
    def num_items(self):
        return self.params.num_items

    def scores(self, batch):
        return forward(self.params, batch, ablation=self.ablation).final.data


class PopScorer:
    """Global popularity from training clicks, the same for every prefix."""

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.float64)

    @property
    def num_items(self):
        return self.counts.size

    def scores(self, batch):
        return np.broadcast_to(self.counts, (len(batch), self.counts.size))


class SPopScorer:
    """Within-prefix click count, ties broken by global popularity."""

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.float64)

    @property
    def num_items(self):
        return self.counts.size

    def scores(self, batch):
        in_session = np.zeros((len(batch), self.counts.size))
        rows = np.broadcast_to(np.arange(len(batch))[:, None], batch.items.shape)
        np.add.at(in_session, (rows[batch.mask], batch.items[batch.mask]), 1.0)
        return in_session * (self.counts.max() + 1.0) + self.counts


def popularity(train_sessions, num_items):
    counts = np.zeros(num_items, dtype=np.int64)
    for s in train_sessions:
        np.add.at(counts, np.asarray(s.items, dtype=np.intp), 1)
    return counts


def baseline_pop(train_sessions, num_items):
    """Items ranked by training-set click count."""
    counts = popularity(train_sessions, num_items)
    return rank(counts, num_items)


def baseline_spop(prefix, global_counts):
    """Items ranked by count in ``prefix``, then global count, then index."""
    local = Counter(prefix)
    n = len(global_counts)
    return sorted(range(n), key=lambda i: (-local.get(i, 0), -global_counts[i], i))


def evaluate(scorer, examples, ks=(10, 20), breakdown=False, label="", batch_size=512):
    if not examples:
        raise EmptyDatasetError("nothing to evaluate")
    ranks, repeats = [], []
    for b in make_batches(examples, batch_size):
        ranks.append(target_ranks(scorer.scores(b), b.targets))
        repeats.append(b.is_repeat)
    return report_from_ranks(np.concatenate(ranks), np.concatenate(repeats), ks, breakdown, label)


def score_prefix(scorer, prefix):
    return scorer.scores(Batch.from_prefix(prefix))[0]
