"""Losses, Adam with clipping, the epoch loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import batch as make_batches
from .data import unroll
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    NumericError,
)
from .model import ABLATIONS, ModelParams, forward, init_params

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"RPNCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip: float = 5.0
    batch_size: int = 1024
    dropout: float = 0.5
    lr_halve_every: int = 3
    max_epochs: int = 30
    joint_mode_loss: bool = False
    seed: int = 0
    ablation: str = "full"
    d_emb: int = 100
    d_hid: int = 100

    def __post_init__(self):
        for name in ("lr", "epsilon", "clip"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must be in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must be in [0, 1)")
        for name in ("batch_size", "lr_halve_every", "max_epochs", "d_emb", "d_hid"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be at least 1")
        if self.ablation not in ABLATIONS:
            raise ContractError(f"ablation must be one of {', '.join(ABLATIONS)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ContractError(f"unknown config key {key!r}")
            default = getattr(cls, key)
            kwargs[key] = _coerce(value, type(default), key)
        return cls(**kwargs)


def _coerce(value, kind, key):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {value!r}") from None


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def write_config_file(values, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key}={values[key]}\n")


def lr_at_epoch(config, epoch):
    """Learning rate for 1-based ``epoch``: halved every ``lr_halve_every`` epochs."""
    return config.lr * 0.5 ** ((epoch - 1) // config.lr_halve_every)


# -- losses -----------------------------------------------------------------


def _check_targets(targets, num_items):
    if targets.size and (targets.min() < 0 or targets.max() >= num_items):
        raise ContractError(f"target outside vocabulary of size {num_items}")


def nll(final, targets):
    """Mean of ``-log max(p[target], 1e-12)``."""
    picked = T.clamp_min(T.pick(final, targets), LOG_FLOOR)
    return -T.mean(T.log(picked))


def mode_nll(p_mode, is_repeat):
    """Mean binary NLL of the mode predictor against ``target in prefix``."""
    labels = np.where(is_repeat, 0, 1)
    picked = T.clamp_min(T.pick(p_mode, labels), LOG_FLOOR)
    return -T.mean(T.log(picked))


def loss_rec(params, batch, train=False, rng=None, dropout=0.0, ablation="full"):
    _check_targets(batch.targets, params.num_items)
    out = forward(params, batch, train, rng, dropout, ablation)
    return nll(out.final, batch.targets)


def loss_mode(params, batch, train=False, rng=None, dropout=0.0, ablation="full"):
    _check_targets(batch.targets, params.num_items)
    out = forward(params, batch, train, rng, dropout, ablation)
    return mode_nll(out.p_mode, batch.is_repeat)


def total_loss(params, batch, config, train=False, rng=None):
    """``L_rec``, plus ``L_mode`` when ``config.joint_mode_loss`` is set."""
    _check_targets(batch.targets, params.num_items)
    out = forward(params, batch, train, rng, config.dropout if train else 0.0, config.ablation)
    loss = nll(out.final, batch.targets)
    if config.joint_mode_loss:
        loss = loss + mode_nll(out.p_mode, batch.is_repeat)
    return loss


# -- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params):
        return cls(
            0,
            {n: np.zeros_like(t.data) for n, t in params.named_parameters()},
            {n: np.zeros_like(t.data) for n, t in params.named_parameters()},
        )


def adam_step(params, state, config, lr=None):
    """One clipped, bias-corrected Adam update; zeroes gradients afterwards.

    Parameters without a gradient (unused by the current ablation) are
    treated as having a zero gradient.
    """
    lr = config.lr if lr is None else lr
    grads = {}
    for name, p in params.named_parameters():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        grads[name] = np.clip(g, -config.clip, config.clip)
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.named_parameters():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        p.grad = None


# -- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams  # best by validation MRR@20
    last_params: ModelParams
    state: AdamState
    log: list
    best_epoch: int


def _streams(seed):
    init_seed = int(np.random.SeedSequence([seed, 0]).generate_state(1)[0])
    shuffle = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    drop = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
    return init_seed, shuffle, drop


def train(dataset, config, on_epoch=None, params=None):
    """Train on ``dataset.train``, validating after every epoch.

    Returns the parameters with the best validation MRR@20 (the last epoch
    when there is no validation data), the final parameters, the optimiser
    state and one log record per epoch.
    """
    from .evaluation import ModelScorer, evaluate

    if not dataset.train:
        raise ContractError("training split is empty")
    examples = unroll(dataset.train)
    val_examples = unroll(dataset.validation) if dataset.validation else []
    init_seed, shuffle_rng, dropout_rng = _streams(config.seed)
    if params is None:
        params = init_params(len(dataset.vocabulary), config.d_emb, config.d_hid, seed=init_seed)
    state = AdamState.fresh(params)
    log, best, best_score, best_epoch = [], None, -math.inf, 0

    for epoch in range(1, config.max_epochs + 1):
        lr = lr_at_epoch(config, epoch)
        order = shuffle_rng.permutation(len(examples))
        shuffled = [examples[i] for i in order]
        total, seen = 0.0, 0
        for b, batch in enumerate(make_batches(shuffled, config.batch_size, rng=shuffle_rng)):
            loss = total_loss(params, batch, config, train=True, rng=dropout_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(params, state, config, lr)
            total += value * len(batch)
            seen += len(batch)
        record = {"epoch": epoch, "lr": lr, "train_loss": total / seen}
        if val_examples:
            report = evaluate(ModelScorer(params, config.ablation), val_examples, ks=(20,))
            record["val_mrr20"] = report.mrr(20)
            record["val_recall20"] = report.recall(20)
            score = record["val_mrr20"]
        else:
            record["val_mrr20"] = record["val_recall20"] = None
            score = epoch
        if score > best_score:
            best_score, best, best_epoch = score, params.copy(), epoch
        log.append(record)
        logger.info("epoch %d lr=%g loss=%.5f val_mrr20=%s", epoch, lr, record["train_loss"], record["val_mrr20"])
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(best, params, state, log, best_epoch)


# -- checkpoints ------------------------------------------------------------

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path, params, state=None, config=None, vocabulary=None, dtype="float64", extra=None):
    """Write ``RPNCKPT1`` | u32 version | u64 header length | JSON header | raw arrays.

    Arrays are little-endian, row-major, in manifest order.
    """
    if dtype not in _DTYPES:
        raise ContractError(f"checkpoint dtype must be one of {list(_DTYPES)}")
    arrays = [(name, t.data) for name, t in params.named_parameters()]
    if state is not None:
        arrays += [(f"adam.m.{n}", a) for n, a in state.m.items()]
        arrays += [(f"adam.v.{n}", a) for n, a in state.v.items()]
    manifest, blobs, offset = [], [], 0
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "sizes": {"num_items": params.num_items, "d_emb": params.d_emb, "d_hid": params.d_hid},
        "config": config.to_dict() if config is not None else None,
        "vocab_hash": vocabulary.digest() if vocabulary is not None else None,
        "vocab": vocabulary.item_ids if vocabulary is not None else None,
        "adam_step": state.step if state is not None else None,
        "extra": extra or {},
        "manifest": manifest,
        "data_bytes": offset,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


@dataclass
class Checkpoint:
    params: ModelParams
    state: AdamState | None
    config: TrainConfig | None
    header: dict

    @property
    def vocab(self):
        return self.header.get("vocab")


def load_checkpoint(path, expected_shapes=None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``expected_shapes`` maps dotted names to shapes for the current
    configuration; any disagreement raises :class:`CheckpointShapeError`.
    Nothing is returned unless the whole file reads cleanly.
    """
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    prefix = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC[: len(buf)]:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if len(buf) < prefix:
        raise CheckpointTruncatedError(f"{path} is truncated inside the file preamble")
    version, header_len = struct.unpack_from("<IQ", buf, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format {version}, expected {CHECKPOINT_VERSION}")
    if len(buf) < prefix + header_len:
        raise CheckpointTruncatedError(f"{path} is truncated inside the header")
    try:
        header = json.loads(buf[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    body = buf[prefix + header_len :]
    if len(body) < header["data_bytes"]:
        raise CheckpointTruncatedError(
            f"{path} is truncated: {len(body)} of {header['data_bytes']} data bytes present"
        )
    arrays = {}
    for entry in header["manifest"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)

    if expected_shapes is not None:
        bad = [
            f"{name}: checkpoint {tuple(arrays[name].shape) if name in arrays else 'missing'} vs expected {tuple(shape)}"
            for name, shape in expected_shapes.items()
            if name not in arrays or tuple(arrays[name].shape) != tuple(shape)
        ]
        if bad:
            raise CheckpointShapeError("shape mismatch: " + "; ".join(bad))

    try:
        params = ModelParams.from_arrays(arrays)
    except KeyError as exc:
        raise CheckpointError(f"{path}: parameter {exc.args[0]} missing from checkpoint") from None
    state = None
    if header.get("adam_step") is not None:
        state = AdamState(
            header["adam_step"],
            {n: arrays[f"adam.m.{n}"].copy() for n, _ in params.named_parameters()},
            {n: arrays[f"adam.v.{n}"].copy() for n, _ in params.named_parameters()},
        )
    config = TrainConfig.from_dict(header["config"]) if header.get("config") else None
    return Checkpoint(params, state, config, header)
