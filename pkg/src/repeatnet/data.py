"""Session datasets: CSV ingestion, filtering, prefix unrolling, batching.

Input CSV files have the header ``session_id,timestamp,item_id``. Rows of
one session need not be contiguous; within a session clicks are ordered by
timestamp (ties and missing timestamps keep file order).
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, EmptyDatasetError, ParseError, VocabularyError

CSV_HEADER = ("session_id", "timestamp", "item_id")
DATASET_MAGIC = "RPNDATA1"
DATASET_VERSION = 1


@dataclass
class Session:
    id: str
    items: list
    timestamps: Optional[list] = None

    def __len__(self):
        return len(self.items)


@dataclass
class Vocabulary:
    """Bijection between raw item ids and dense indices ``0..n-1``."""

    item_ids: list
    frequency: list
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {item: i for i, item in enumerate(self.item_ids)}
        if len(self._index) != len(self.item_ids):
            raise VocabularyError("duplicate item ids in vocabulary")
        if len(self.frequency) != len(self.item_ids):
            raise VocabularyError("frequency table does not match vocabulary size")

    def __len__(self):
        return len(self.item_ids)

    def __contains__(self, item_id):
        return item_id in self._index

    def index(self, item_id):
        try:
            return self._index[item_id]
        except KeyError:
            raise VocabularyError(f"unknown item id {item_id!r}") from None

    def get(self, item_id, default=None):
        return self._index.get(item_id, default)

    def decode(self, idx):
        return self.item_ids[idx]

    def digest(self):
        h = hashlib.sha256()
        for item in self.item_ids:
            h.update(item.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()[:16]

    @classmethod
    def from_sessions(cls, raw_sessions):
        """Index items in first-appearance order; count every click."""
        counts = Counter()
        order = []
        for items in raw_sessions:
            for item in items:
                if item not in counts:
                    order.append(item)
                counts[item] += 1
        return cls(order, [counts[i] for i in order])

    @classmethod
    def identity(cls, num_items, sessions=()):
        counts = np.zeros(num_items, dtype=np.int64)
        for s in sessions:
            np.add.at(counts, np.asarray(s.items, dtype=np.intp), 1)
        return cls([str(i) for i in range(num_items)], [int(c) for c in counts])


@dataclass(frozen=True)
class PrefixExample:
    prefix: tuple
    target: int

    @property
    def is_repeat(self):
        return self.target in self.prefix


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    vocabulary: Vocabulary

    def splits(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


# -- ingestion --------------------------------------------------------------


def _read_rows(path):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header", line=1, path=path) from None
        header = [h.strip() for h in header]
        if tuple(header) != CSV_HEADER:
            raise ParseError(
                f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}", line=1, path=path
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno, path=path)
            sid, ts, item = (f.strip() for f in row)
            if not sid or not item:
                raise ParseError("session_id and item_id must be non-empty", line=lineno, path=path)
            if ts == "":
                stamp = None
            else:
                try:
                    stamp = int(ts)
                except ValueError:
                    raise ParseError(f"timestamp {ts!r} is not an integer", line=lineno, path=path) from None
            yield sid, stamp, item


def _group(rows):
    """Group rows per session, order clicks and sessions chronologically."""
    sessions = {}
    for sid, stamp, item in rows:
        sessions.setdefault(sid, []).append((stamp, item))
    grouped = []
    for sid, clicks in sessions.items():
        if all(stamp is not None for stamp, _ in clicks):
            clicks = sorted(clicks, key=lambda c: c[0])
            stamps = [c[0] for c in clicks]
        else:
            stamps = None
        grouped.append((sid, [c[1] for c in clicks], stamps))
    if all(g[2] is not None for g in grouped):
        grouped.sort(key=lambda g: g[2][0])
    return grouped


def _filter(grouped, min_item_count, min_session_len, max_session_len, keep_item=None):
    """Drop rare items then out-of-range sessions, repeated to a fixed point."""

    def in_range(n):
        return n >= min_session_len and (max_session_len is None or n <= max_session_len)

    while True:
        counts = Counter(item for _, items, _ in grouped for item in items)
        changed = False
        out = []
        for sid, items, stamps in grouped:
            keep = [
                k
                for k, item in enumerate(items)
                if counts[item] >= min_item_count and (keep_item is None or keep_item(item))
            ]
            if len(keep) != len(items):
                changed = True
            if not in_range(len(keep)):
                changed = True
                continue
            out.append(
                (sid, [items[k] for k in keep], None if stamps is None else [stamps[k] for k in keep])
            )
        grouped = out
        if not changed:
            return grouped


def ingest(path, min_item_count=5, min_session_len=2, max_session_len=None, vocabulary=None):
    """Read a session CSV and apply the filtering protocol.

    Items seen fewer than ``min_item_count`` times are removed first, then
    sessions shorter than ``min_session_len`` or longer than
    ``max_session_len`` are dropped. Both rules are reapplied until nothing
    changes, so ingesting the output again is a no-op.

    When ``vocabulary`` is given, items outside it are dropped from their
    sessions and the returned vocabulary is that one.

    Returns ``(sessions, vocabulary)``.
    """
    if min_item_count < 1 or min_session_len < 1:
        raise ContractError("min-item-count and min-session-len must be at least 1")
    if max_session_len is not None and max_session_len < min_session_len:
        raise ContractError("max-session-len is smaller than min-session-len")
    grouped = _group(_read_rows(path))
    keep_item = None if vocabulary is None else vocabulary.__contains__
    grouped = _filter(grouped, min_item_count, min_session_len, max_session_len, keep_item)
    if not grouped:
        raise EmptyDatasetError(f"no sessions survive filtering in {path}")
    if vocabulary is None:
        vocabulary = Vocabulary.from_sessions(items for _, items, _ in grouped)
    sessions = [
        Session(sid, [vocabulary.index(i) for i in items], stamps) for sid, items, stamps in grouped
    ]
    return sessions, vocabulary


def write_csv(sessions, vocabulary, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in sessions:
            stamps = s.timestamps or [""] * len(s.items)
            for stamp, idx in zip(stamps, s.items):
                writer.writerow((s.id, stamp, vocabulary.decode(idx)))


# -- examples ---------------------------------------------------------------


def unroll(sessions):
    """Every proper prefix of every session, paired with the next item."""
    examples = []
    for s in sessions:
        if len(s.items) < 2:
            raise ContractError(f"session {s.id!r} has fewer than 2 items")
        items = tuple(s.items)
        examples.extend(PrefixExample(items[:k], items[k]) for k in range(1, len(items)))
    return examples


def repeat_ratio(examples):
    if not examples:
        raise EmptyDatasetError("repeat ratio of an empty example list")
    return sum(ex.is_repeat for ex in examples) / len(examples)


def synthesize(num_items, num_sessions, len_range, repeat_prob, seed, zipf_exponent=1.0):
    """Generate sessions with a controllable repeat rate.

    The first item and every "explore" draw come from a Zipf popularity law
    over all items (item 0 most popular). With probability ``repeat_prob``
    the next item is instead a uniformly chosen earlier position.
    """
    lo, hi = len_range
    if num_items < 2:
        raise ContractError("num-items must be at least 2")
    if num_sessions < 1:
        raise ContractError("num-sessions must be at least 1")
    if not 2 <= lo <= hi:
        raise ContractError(f"invalid session length range {len_range}")
    if not 0.0 <= repeat_prob <= 1.0:
        raise ContractError(f"repeat-prob must be in [0, 1], got {repeat_prob}")
    if zipf_exponent < 0:
        raise ContractError("zipf exponent must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = 1.0 / np.arange(1, num_items + 1, dtype=np.float64) ** zipf_exponent
    popularity = np.cumsum(weights / weights.sum())
    popularity[-1] = 1.0

    def draw_popular():
        return int(np.searchsorted(popularity, rng.random(), side="right"))

    sessions = []
    for k in range(num_sessions):
        length = int(rng.integers(lo, hi + 1))
        items = [draw_popular()]
        while len(items) < length:
            if rng.random() < repeat_prob:
                items.append(items[int(rng.integers(len(items)))])
            else:
                items.append(draw_popular())
        start = 1_500_000_000 + 3600 * k
        sessions.append(Session(f"s{k}", items, [start + 60 * j for j in range(length)]))
    return sessions


def split_sessions(sessions, ratios=(8, 1, 1), by="chrono", seed=0):
    """Session-level split into train/validation/test.

    ``chrono`` keeps the given (chronological) order and cuts it; ``random``
    shuffles with ``seed`` first. Each part keeps the original order.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ContractError(f"invalid split ratios {ratios}")
    n = len(sessions)
    if by == "random":
        order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    elif by == "chrono":
        order = np.arange(n)
    else:
        raise ContractError(f"unknown split mode {by!r}")
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    parts = (
        order[:n_train],
        order[n_train : n_train + n_val],
        order[n_train + n_val :],
    )
    return tuple([sessions[i] for i in sorted(part)] for part in parts)


def parse_ratios(text):
    try:
        ratios = tuple(int(x) for x in text.split(":"))
    except ValueError:
        raise ContractError(f"split must look like 8:1:1, got {text!r}") from None
    if len(ratios) != 3:
        raise ContractError(f"split must have three parts, got {text!r}")
    return ratios


# -- batching ---------------------------------------------------------------


@dataclass
class Batch:
    items: np.ndarray  # (B, T) item indices, padded
    mask: np.ndarray  # (B, T) True at real positions
    targets: np.ndarray  # (B,)
    is_repeat: np.ndarray  # (B,) bool

    def __len__(self):
        return len(self.targets)

    @property
    def lengths(self):
        return self.mask.sum(axis=1)

    @classmethod
    def from_examples(cls, examples, pad_index=0, width=None):
        width = width or max(len(ex.prefix) for ex in examples)
        items = np.full((len(examples), width), pad_index, dtype=np.int64)
        mask = np.zeros((len(examples), width), dtype=bool)
        for row, ex in enumerate(examples):
            items[row, : len(ex.prefix)] = ex.prefix
            mask[row, : len(ex.prefix)] = True
        targets = np.array([ex.target for ex in examples], dtype=np.int64)
        is_repeat = np.array([ex.is_repeat for ex in examples], dtype=bool)
        return cls(items, mask, targets, is_repeat)

    @classmethod
    def from_prefix(cls, prefix):
        prefix = tuple(int(i) for i in prefix)
        if not prefix:
            raise ContractError("prefix must be non-empty")
        items = np.array([prefix], dtype=np.int64)
        return cls(items, np.ones_like(items, dtype=bool), np.zeros(1, dtype=np.int64), np.zeros(1, dtype=bool))


def batch(examples: Sequence[PrefixExample], batch_size: int, pad_index: int = 0, rng=None) -> Iterator[Batch]:
    """Length-bucketed padded batches.

    Examples are stably sorted by prefix length before chunking, so each
    batch pads only to its own longest prefix. With ``rng`` the batch order
    is shuffled.
    """
    if batch_size < 1:
        raise ContractError("batch-size must be at least 1")
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].prefix))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for chunk in chunks:
        yield Batch.from_examples([examples[i] for i in chunk], pad_index)


# -- prepared dataset files -------------------------------------------------


def _encode_sessions(sessions):
    return [[s.id, list(s.items), s.timestamps] for s in sessions]


def _decode_sessions(rows, n):
    out = []
    for sid, items, stamps in rows:
        if any(not 0 <= i < n for i in items):
            raise VocabularyError(f"session {sid!r} references an item outside the vocabulary")
        out.append(Session(sid, list(items), stamps))
    return out


def save_dataset(split: DatasetSplit, path, meta=None):
    body = {
        "version": DATASET_VERSION,
        "meta": meta or {},
        "vocabulary": {"item_ids": split.vocabulary.item_ids, "frequency": split.vocabulary.frequency},
        "splits": {name: _encode_sessions(ss) for name, ss in split.splits().items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DATASET_MAGIC + "\n")
        json.dump(body, fh, separators=(",", ":"))
        fh.write("\n")


def load_dataset(path):
    """Returns ``(DatasetSplit, meta)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            magic = fh.readline().rstrip("\n")
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if magic != DATASET_MAGIC:
        raise DataError(f"{path} is not a prepared dataset (bad magic {magic[:16]!r})")
    try:
        body = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is corrupt or truncated: {exc}") from exc
    if body.get("version") != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {body.get('version')}")
    vocab = Vocabulary(body["vocabulary"]["item_ids"], body["vocabulary"]["frequency"])
    splits = {name: _decode_sessions(rows, len(vocab)) for name, rows in body["splits"].items()}
    return DatasetSplit(splits["train"], splits["validation"], splits["test"], vocab), body.get("meta", {})


def encode_session(raw_ids, vocabulary):
    """Map raw ids to indices, dropping unknown ones. Returns (indices, unknown)."""
    known, unknown = [], []
    for item in raw_ids:
        idx = vocabulary.get(item)
        (unknown if idx is None else known).append(item if idx is None else idx)
    return known, unknown
