"""Embedding lookup and GRU session encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import VocabularyError
from .tensor import Tensor


@dataclass
class EncodedSession:
    states: Tensor  # (B, T, d_hid); rows past a prefix's end repeat its last state
    final: Tensor  # (B, d_hid), state at the last valid position
    mask: np.ndarray  # (B, T) bool

    @property
    def batch_size(self):
        return self.states.shape[0]


def _as_batch(items, mask):
    items = np.asarray(items, dtype=np.int64)
    if items.ndim == 1:
        items = items[None, :]
    if mask is None:
        mask = np.ones(items.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    return items, mask


def encode(items, mask, embedding, gru, train=False, rng=None, dropout=0.0):
    """Encode padded prefixes ``items`` (B, T) into GRU hidden states.

    Starts from ``h_0 = 0``. Each step computes
    ``z = sigmoid(W_z [x, h] + b_z)``, ``r = sigmoid(W_r [x, h] + b_r)``,
    ``h~ = tanh(W_h [x, r * h] + b_h)`` and ``h = (1 - z) * h + z * h~``.
    At padded positions the previous state is carried forward unchanged.
    Dropout hits the item embeddings in training mode only.
    """
    items, mask = _as_batch(items, mask)
    n_items = embedding.weight.shape[0]
    if not mask[:, 0].all():
        raise ValueError("every prefix must be non-empty and left-aligned")
    used = items[mask]
    if used.size and (used.min() < 0 or used.max() >= n_items):
        raise VocabularyError(f"item index out of range for vocabulary of size {n_items}")

    batch_size, steps = items.shape
    d_hid = gru.W_z.shape[0]
    safe = np.where(mask, items, 0)
    W_z, W_r, W_h = gru.W_z.T, gru.W_r.T, gru.W_h.T
    h = T.constant(np.zeros((batch_size, d_hid)))
    states = []
    for t in range(steps):
        x = T.take_rows(embedding.weight, safe[:, t])
        x = T.dropout(x, dropout, train, rng)
        xh = T.concat([x, h], axis=1)
        z = T.sigmoid(xh @ W_z + gru.b_z)
        r = T.sigmoid(xh @ W_r + gru.b_r)
        cand = T.tanh(T.concat([x, r * h], axis=1) @ W_h + gru.b_h)
        h_new = (1.0 - z) * h + z * cand
        valid = mask[:, t]
        if valid.all():
            h = h_new
        else:
            m = valid[:, None].astype(np.float64)
            h = h_new * m + h * (1.0 - m)
        states.append(h)
    return EncodedSession(T.stack(states, axis=1), h, mask)
