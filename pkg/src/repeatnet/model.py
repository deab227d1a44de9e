"""Parameter containers and the full forward pass."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .data import Batch
from .decoders import (
    Prediction,
    explore_distribution,
    mix,
    predict_mode,
    prefix_mask,
    repeat_distribution,
)
from .encoder import encode
from .tensor import Tensor

ABLATIONS = ("full", "no-repeat", "no-attention")


class _Group:
    """Dataclass mixin: iterate tensors as ``(field_name, tensor)``."""

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class EmbeddingTable(_Group):
    weight: Tensor  # (num_items, d_emb)


@dataclass
class GRUParams(_Group):
    W_z: Tensor  # (d_hid, d_emb + d_hid)
    W_r: Tensor
    W_h: Tensor
    b_z: Tensor  # (d_hid,)
    b_r: Tensor
    b_h: Tensor


@dataclass
class ModePredictorParams(_Group):
    v_re: Tensor  # (d_att,)
    W_re: Tensor  # (d_att, d_hid)
    U_re: Tensor
    W_c_re: Tensor  # (2, d_hid)


@dataclass
class RepeatDecoderParams(_Group):
    v_r: Tensor
    W_r: Tensor
    U_r: Tensor


@dataclass
class ExploreDecoderParams(_Group):
    v_e: Tensor
    W_e: Tensor
    U_e: Tensor
    W_c_e: Tensor  # (num_items, 2 * d_hid)


@dataclass
class ModelParams:
    embedding: EmbeddingTable
    gru: GRUParams
    mode: ModePredictorParams
    repeat: RepeatDecoderParams
    explore: ExploreDecoderParams

    GROUPS = ("embedding", "gru", "mode", "repeat", "explore")

    def named_parameters(self):
        for group in self.GROUPS:
            for name, t in getattr(self, group).items():
                yield f"{group}.{name}", t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def get(self, dotted):
        group, name = dotted.split(".", 1)
        return getattr(getattr(self, group), name)

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    @property
    def num_items(self):
        return self.embedding.weight.shape[0]

    @property
    def d_emb(self):
        return self.embedding.weight.shape[1]

    @property
    def d_hid(self):
        return self.gru.W_z.shape[0]

    def shapes(self):
        return {name: tuple(t.shape) for name, t in self.named_parameters()}

    def copy(self):
        return ModelParams.from_arrays({n: t.data.copy() for n, t in self.named_parameters()})

    @classmethod
    def from_arrays(cls, arrays):
        """Build from a ``{dotted_name: ndarray}`` mapping."""
        groups = {}
        for group, klass in zip(
            cls.GROUPS,
            (EmbeddingTable, GRUParams, ModePredictorParams, RepeatDecoderParams, ExploreDecoderParams),
        ):
            groups[group] = klass(
                **{f.name: T.parameter(arrays[f"{group}.{f.name}"]) for f in fields(klass)}
            )
        return cls(**groups)


def param_shapes(num_items, d_emb=100, d_hid=100, d_att=None):
    d_att = d_att or d_hid
    return {
        "embedding.weight": (num_items, d_emb),
        "gru.W_z": (d_hid, d_emb + d_hid),
        "gru.W_r": (d_hid, d_emb + d_hid),
        "gru.W_h": (d_hid, d_emb + d_hid),
        "gru.b_z": (d_hid,),
        "gru.b_r": (d_hid,),
        "gru.b_h": (d_hid,),
        "mode.v_re": (d_att,),
        "mode.W_re": (d_att, d_hid),
        "mode.U_re": (d_att, d_hid),
        "mode.W_c_re": (2, d_hid),
        "repeat.v_r": (d_att,),
        "repeat.W_r": (d_att, d_hid),
        "repeat.U_r": (d_att, d_hid),
        "explore.v_e": (d_att,),
        "explore.W_e": (d_att, d_hid),
        "explore.U_e": (d_att, d_hid),
        "explore.W_c_e": (num_items, 2 * d_hid),
    }


def xavier_uniform(shape, rng):
    """Glorot uniform; a vector is treated as a single-column matrix."""
    fan_out, fan_in = shape if len(shape) == 2 else (shape[0], 1)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(num_items, d_emb=100, d_hid=100, d_att=None, seed=0):
    """Xavier-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {}
    for name, shape in param_shapes(num_items, d_emb, d_hid, d_att).items():
        if name.split(".")[1].startswith("b_"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = xavier_uniform(shape, rng)
    return ModelParams.from_arrays(arrays)


@dataclass
class Forward:
    """Batched model outputs; row ``b`` belongs to example ``b``."""

    p_mode: Tensor  # (B, 2): [P(repeat), P(explore)]
    repeat: Tensor  # (B, I)
    explore: Tensor  # (B, I)
    final: Tensor  # (B, I)


def forward(params, batch, train=False, rng=None, dropout=0.0, ablation="full"):
    """Run encoder, mode predictor, both decoders and the mixture.

    ``no-repeat`` pins the mode to explore, detaches the repeat branch and
    lets the explore decoder score every item, in-session ones included.
    ``no-attention`` feeds ``[h_t, h_t]`` to the explore projection.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    enc = encode(batch.items, batch.mask, params.embedding, params.gru, train, rng, dropout)
    n = params.num_items
    if ablation == "no-repeat":
        explore = explore_distribution(
            enc, batch.items, params.explore, n, train, rng, dropout, mask_prefix=False
        )
        rows = len(batch)
        p_mode = T.constant(np.tile([0.0, 1.0], (rows, 1)))
        repeat = T.constant(np.zeros((rows, n)))
        return Forward(p_mode, repeat, explore, explore)
    p_mode = predict_mode(enc, params.mode)
    repeat = repeat_distribution(enc, batch.items, params.repeat, n)
    explore = explore_distribution(
        enc,
        batch.items,
        params.explore,
        n,
        train,
        rng,
        dropout,
        use_attention=ablation != "no-attention",
    )
    final = mix(p_mode, repeat, explore, explore_support=explore_support(batch.items, batch.mask, n))
    return Forward(p_mode, repeat, explore, final)


def explore_support(items, mask, num_items):
    """True for rows whose prefix leaves at least one item unseen."""
    return ~prefix_mask(items, mask, num_items).all(axis=1)


def predict(params, prefix, ablation="full"):
    """Single-prefix inference in eval mode."""
    batch = Batch.from_prefix(prefix)
    out = forward(params, batch, ablation=ablation)
    return Prediction.from_forward(out, list(batch.items[0]), repeat_active=ablation != "no-repeat")
