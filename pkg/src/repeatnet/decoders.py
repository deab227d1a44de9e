"""Repeat-explore mode predictor, the two item decoders and their mixture.

All functions work on batches: an :class:`~repeatnet.encoder.EncodedSession`
with states of shape (B, T, d) and padded item indices of shape (B, T).
Distributions over items come back dense, shape (B, num_items).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


def attention_scores(enc, W, U, v):
    """``e_tau = v^T tanh(W h_t + U h_tau)`` for every position, shape (B, T)."""
    B, steps, d = enc.states.shape
    a = W.shape[0]
    query = (enc.final @ W.T).reshape(B, 1, a)
    keys = (enc.states.reshape(B * steps, d) @ U.T).reshape(B, steps, a)
    hidden = T.tanh(keys + query)
    return (hidden.reshape(B * steps, a) @ v.reshape(a, 1)).reshape(B, steps)


def attend(enc, W, U, v):
    """Attention weights over valid positions and the context vector."""
    alpha = T.softmax(attention_scores(enc, W, U, v), mask=enc.mask)
    B, steps, d = enc.states.shape
    context = (alpha.reshape(B, steps, 1) * enc.states).sum(axis=1)
    return alpha, context


def predict_mode(enc, params):
    """(B, 2) tensor of ``[P(repeat), P(explore)]``."""
    _, context = attend(enc, params.W_re, params.U_re, params.v_re)
    return T.softmax(context @ params.W_c_re.T)


def repeat_distribution(enc, items, params, num_items):
    """Copy-style distribution over the items of each prefix.

    Position weights are a softmax of the repeat attention scores; an item
    occurring at several positions collects the weight of all of them.
    """
    alpha = T.softmax(attention_scores(enc, params.W_r, params.U_r, params.v_r), mask=enc.mask)
    safe = np.where(enc.mask, items, 0)
    return T.scatter_add(alpha, safe, num_items)


def prefix_mask(items, mask, num_items):
    """(B, I) bool, True where the item occurs in the row's prefix."""
    seen = np.zeros((items.shape[0], num_items), dtype=bool)
    rows = np.broadcast_to(np.arange(items.shape[0])[:, None], items.shape)
    seen[rows[mask], items[mask]] = True
    return seen


def explore_distribution(
    enc,
    items,
    params,
    num_items,
    train=False,
    rng=None,
    dropout=0.0,
    use_attention=True,
    mask_prefix=True,
):
    """Distribution over items not yet in the prefix.

    The hybrid state ``[h_t, c_e]`` is projected to one score per item;
    prefix items are excluded from the softmax support and get exactly 0.
    A row whose prefix covers the whole vocabulary comes out all-zero.
    """
    if use_attention:
        _, context = attend(enc, params.W_e, params.U_e, params.v_e)
    else:
        context = enc.final
    hybrid = T.concat([enc.final, context], axis=1)
    hybrid = T.dropout(hybrid, dropout, train, rng)
    scores = hybrid @ params.W_c_e.T
    if not mask_prefix:
        return T.softmax(scores)
    support = ~prefix_mask(items, enc.mask, num_items)
    return T.softmax(scores, mask=support, empty="zero")


def mix(p_mode, repeat, explore, explore_support=None):
    """``P(i) = P(repeat) P(i | repeat) + P(explore) P(i | explore)``.

    ``explore_support`` flags rows where the explore branch has any support;
    rows without it are renormalised onto the repeat branch.
    """
    p_repeat = T.index_select(p_mode, (slice(None), slice(0, 1)))
    p_explore = T.index_select(p_mode, (slice(None), slice(1, 2)))
    final = p_repeat * repeat + p_explore * explore
    if explore_support is not None and not np.all(explore_support):
        keep = np.asarray(explore_support, dtype=np.float64)[:, None]
        final = final / (p_repeat + p_explore * keep)
    return final


@dataclass
class Prediction:
    """Outputs for a single prefix."""

    p_repeat: float
    p_explore: float
    repeat_dist: dict  # item -> prob, support within the prefix
    explore_dist: np.ndarray  # (I,)
    final: np.ndarray  # (I,)

    @property
    def p_mode(self):
        return self.p_repeat, self.p_explore

    def branch(self, item):
        """Which branch an item's mass comes from."""
        return "repeat" if item in self.repeat_dist else "explore"

    @classmethod
    def from_forward(cls, out, prefix, row=0, repeat_active=True):
        rep = out.repeat.data[row]
        support = sorted(set(int(i) for i in prefix)) if repeat_active else []
        return cls(
            p_repeat=float(out.p_mode.data[row, 0]),
            p_explore=float(out.p_mode.data[row, 1]),
            repeat_dist={i: float(rep[i]) for i in support},
            explore_dist=out.explore.data[row].copy(),
            final=out.final.data[row].copy(),
        )
