import math

import numpy as np
import pytest

from repeatnet import tensor as T
from repeatnet.data import Batch, DatasetSplit, PrefixExample, Vocabulary, split_sessions, synthesize
from repeatnet.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    NumericError,
)
from repeatnet.model import forward, init_params, param_shapes
from repeatnet.training import (
    AdamState,
    TrainConfig,
    adam_step,
    load_checkpoint,
    loss_mode,
    loss_rec,
    lr_at_epoch,
    mode_nll,
    nll,
    read_config_file,
    save_checkpoint,
    total_loss,
    train,
    write_config_file,
)

from conftest import central_difference, randomize, rel_error, toy_examples


def small_dataset(items=20, sessions=150, seed=0):
    sess = synthesize(items, sessions, (3, 7), 0.5, seed=seed)
    tr, va, te = split_sessions(sess)
    return DatasetSplit(tr, va, te, Vocabulary.identity(items, tr))


def small_config(**kw):
    base = dict(d_emb=6, d_hid=6, batch_size=32, max_epochs=2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# -- losses -----------------------------------------------------------------


def test_nll_examples():
    assert nll(T.tensor([[0.0, 1.0]]), np.array([1])).item() == 0.0
    p = math.exp(-2)
    assert nll(T.tensor([[1 - p, p]]), np.array([1])).item() == pytest.approx(2.0, abs=1e-12)
    # an exact zero is clamped rather than producing inf
    assert nll(T.tensor([[1.0, 0.0]]), np.array([1])).item() == pytest.approx(-math.log(1e-12))


def test_mode_nll_examples():
    assert mode_nll(T.tensor([[1.0, 0.0]]), np.array([True])).item() == 0.0
    even = T.tensor([[0.5, 0.5], [0.5, 0.5]])
    for labels in ([True, True], [False, True]):
        assert mode_nll(even, np.array(labels)).item() == pytest.approx(math.log(2), abs=1e-15)
    pair = T.tensor([[1.0, 0.0], [0.5, 0.5]])
    assert mode_nll(pair, np.array([True, False])).item() == pytest.approx(math.log(2) / 2, abs=1e-15)
    assert mode_nll(pair, np.array([True, False])).item() == pytest.approx(0.3466, abs=1e-4)


def uniform_loss_oracle(example, num_items):
    """Closed form when every output projection is zero.

    The mode split is 1/2 each, the repeat branch puts count/len on each
    prefix item and the explore branch is uniform over unseen items.
    """
    prefix, target = example.prefix, example.target
    if target in prefix:
        return -math.log(0.5 * prefix.count(target) / len(prefix))
    return math.log(2) + math.log(num_items - len(set(prefix)))


def test_untrained_zero_projection_loss():
    n = 50
    p = init_params(n, d_emb=8, d_hid=8, seed=3)
    for t in (p.mode.W_c_re, p.explore.W_c_e, p.repeat.v_r):
        t.data[...] = 0.0
    examples = [
        PrefixExample((4,), 7),
        PrefixExample((4, 7), 9),
        PrefixExample((1, 2, 1), 1),
        PrefixExample((5, 6, 7, 8), 6),
    ]
    for ex in examples:
        got = loss_rec(p, Batch.from_examples([ex])).item()
        assert got == pytest.approx(uniform_loss_oracle(ex, n), abs=1e-12)
    got = loss_rec(p, Batch.from_examples(examples)).item()
    expected = math.fsum(uniform_loss_oracle(e, n) for e in examples) / len(examples)
    assert got == pytest.approx(expected, abs=1e-12)
    # one-item explore target: ln 2 + ln 49, i.e. ln 50 up to the mode split
    assert uniform_loss_oracle(examples[0], n) == pytest.approx(math.log(2) + math.log(49))


def test_target_outside_vocabulary(toy_params):
    with pytest.raises(ContractError):
        loss_rec(toy_params, Batch.from_examples([PrefixExample((0, 1), 5)]))
    with pytest.raises(ContractError):
        loss_mode(toy_params, Batch.from_examples([PrefixExample((0, 1), 9)]))


def test_total_loss_joint_switch(toy_params, toy_batch):
    off = total_loss(toy_params, toy_batch, small_config(joint_mode_loss=False)).item()
    assert off == loss_rec(toy_params, toy_batch).item()
    on = total_loss(toy_params, toy_batch, small_config(joint_mode_loss=True)).item()
    mode = loss_mode(toy_params, toy_batch).item()
    assert mode > 0
    assert on == pytest.approx(off + mode, abs=1e-14)
    assert on != off


def test_mode_projection_gets_gradient_without_joint_loss(toy_params, toy_batch):
    total_loss(toy_params, toy_batch, small_config()).backward()
    assert np.any(toy_params.mode.W_c_re.grad != 0)


@pytest.mark.parametrize("joint", [False, True])
def test_end_to_end_gradient_check(joint):
    p = randomize(init_params(5, d_emb=3, d_hid=3), np.random.default_rng(2), 0.7)
    batch = Batch.from_examples(toy_examples() + [PrefixExample((1, 2, 1, 3), 1)])
    config = small_config(joint_mode_loss=joint)

    def objective():
        return total_loss(p, batch, config)

    objective().backward()
    for name, t in p.named_parameters():
        numeric = central_difference(lambda: objective().item(), t.data)
        assert rel_error(t.grad, numeric) < 1e-4, name


def test_padding_leaves_loss_unchanged(toy_params):
    examples = toy_examples()
    together = loss_rec(toy_params, Batch.from_examples(examples)).item()
    alone = [loss_rec(toy_params, Batch.from_examples([e])).item() for e in examples]
    assert together == pytest.approx(sum(alone) / len(alone), abs=1e-9)


# -- optimiser --------------------------------------------------------------


def single_param_step(grad, config=None, steps=1):
    p = init_params(3, d_emb=2, d_hid=2, seed=0)
    before = p.embedding.weight.data.copy()
    state = AdamState.fresh(p)
    config = config or TrainConfig()
    for _ in range(steps):
        for _, t in p.named_parameters():
            t.grad = np.zeros_like(t.data)
        p.embedding.weight.grad = np.full_like(before, grad)
        adam_step(p, state, config)
    return p, state, before


def test_adam_unit_gradient_step():
    p, state, before = single_param_step(1.0)
    delta = p.embedding.weight.data - before
    np.testing.assert_allclose(delta, -0.001 / (1 + 1e-8), rtol=0, atol=1e-15)
    assert state.step == 1
    assert all(t.grad is None for t in p.parameters())


def test_adam_clips_before_moments():
    p7, s7, _ = single_param_step(7.0)
    p5, s5, _ = single_param_step(5.0)
    np.testing.assert_array_equal(p7.embedding.weight.data, p5.embedding.weight.data)
    np.testing.assert_array_equal(s7.m["embedding.weight"], s5.m["embedding.weight"])
    np.testing.assert_allclose(s7.m["embedding.weight"], 0.1 * 5.0, rtol=1e-12)
    np.testing.assert_allclose(s7.v["embedding.weight"], 0.001 * 25.0, rtol=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    p = init_params(4, d_emb=2, d_hid=2, seed=1)
    before = {n: t.data.copy() for n, t in p.named_parameters()}
    state = AdamState.fresh(p)
    for _ in range(3):
        adam_step(p, state, TrainConfig())
    for n, t in p.named_parameters():
        np.testing.assert_array_equal(t.data, before[n])


def test_adam_matches_reference_over_several_steps():
    rng = np.random.default_rng(0)
    grads = [rng.normal(0, 4, size=(3, 2)) for _ in range(4)]
    p = init_params(3, d_emb=2, d_hid=2, seed=0)
    w = p.embedding.weight.data.copy()
    state = AdamState.fresh(p)
    for g in grads:
        p.embedding.weight.grad = g.copy()
        adam_step(p, state, TrainConfig())
    # plain-python reference, one entry at a time
    for idx in np.ndindex(w.shape):
        x, m, v = float(w[idx]), 0.0, 0.0
        for t, g in enumerate(grads, 1):
            gi = min(5.0, max(-5.0, float(g[idx])))
            m = 0.9 * m + 0.1 * gi
            v = 0.999 * v + 0.001 * gi * gi
            x -= 0.001 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.embedding.weight.data[idx] == pytest.approx(x, abs=1e-14)


def test_adam_rejects_non_finite():
    p = init_params(3, d_emb=2, d_hid=2, seed=0)
    p.gru.W_r.grad = np.full(p.gru.W_r.shape, np.nan)
    with pytest.raises(NumericError, match="gru.W_r"):
        adam_step(p, AdamState.fresh(p), TrainConfig())


def test_lr_schedule():
    c = TrainConfig()
    assert [lr_at_epoch(c, e) for e in range(1, 8)] == [0.001] * 3 + [0.0005] * 3 + [0.00025]


@pytest.mark.parametrize("bad", [dict(lr=0), dict(clip=-1), dict(beta1=1.0), dict(ablation="none"), dict(dropout=1.0)])
def test_config_validation(bad):
    with pytest.raises(ContractError):
        TrainConfig(**bad)


def test_config_file_roundtrip(tmp_path):
    c = TrainConfig(lr=0.01, joint_mode_loss=True, ablation="no-attention", batch_size=64)
    write_config_file(c.to_dict(), tmp_path / "c.cfg")
    assert TrainConfig.from_dict(read_config_file(tmp_path / "c.cfg")) == c
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"learning_rate": "1"})


# -- training loop ----------------------------------------------------------


def test_training_is_deterministic():
    data = small_dataset()
    a = train(data, small_config())
    b = train(data, small_config())
    assert a.log == b.log
    for (n, x), (_, y) in zip(a.last_params.named_parameters(), b.last_params.named_parameters()):
        assert np.array_equal(x.data, y.data), n
    c = train(data, small_config(seed=2))
    assert c.log[0]["train_loss"] != a.log[0]["train_loss"]


def test_training_log_and_best_selection():
    data = small_dataset()
    seen = []
    result = train(data, small_config(max_epochs=4, lr_halve_every=2), on_epoch=seen.append)
    assert seen == result.log
    assert [r["lr"] for r in result.log] == [0.001, 0.001, 0.0005, 0.0005]
    assert set(result.log[0]) == {"epoch", "lr", "train_loss", "val_mrr20", "val_recall20"}
    best = max(result.log, key=lambda r: r["val_mrr20"])
    assert result.best_epoch == best["epoch"]


def test_loss_decreases_on_synthetic_data():
    sess = synthesize(50, 1000, (3, 10), 0.5, seed=42)
    tr, va, te = split_sessions(sess)
    data = DatasetSplit(tr, va, te, Vocabulary.identity(50, tr))
    result = train(data, TrainConfig(batch_size=128, max_epochs=5, seed=0))
    losses = [r["train_loss"] for r in result.log]
    assert all(math.isfinite(x) for x in losses)
    assert losses[4] < losses[0]


@pytest.mark.parametrize("ablation", ["no-repeat", "no-attention"])
def test_ablations_train(ablation):
    result = train(small_dataset(), small_config(ablation=ablation))
    assert all(math.isfinite(r["train_loss"]) for r in result.log)


def test_no_repeat_forward_shape(toy_params, toy_batch):
    out = forward(toy_params, toy_batch, ablation="no-repeat")
    np.testing.assert_array_equal(out.p_mode.data, np.tile([0.0, 1.0], (len(toy_batch), 1)))
    np.testing.assert_array_equal(out.final.data, out.explore.data)
    # prefix items stay reachable
    assert np.all(out.final.data > 0)
    loss_rec(toy_params, toy_batch, ablation="no-repeat").backward()
    assert toy_params.repeat.v_r.grad is None
    assert toy_params.mode.W_c_re.grad is None


def test_no_attention_uses_final_state_twice(toy_params, toy_batch):
    full = forward(toy_params, toy_batch)
    flat = forward(toy_params, toy_batch, ablation="no-attention")
    np.testing.assert_array_equal(full.repeat.data, flat.repeat.data)
    np.testing.assert_array_equal(full.p_mode.data, flat.p_mode.data)
    # a projection that only reads the context half no longer varies with attention
    p = toy_params
    p.explore.W_c_e.data[:, : p.d_hid] = 0.0
    alt = p.copy()
    alt.explore.v_e.data[...] *= -3.0
    a = forward(p, toy_batch, ablation="no-attention").explore.data
    b = forward(alt, toy_batch, ablation="no-attention").explore.data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(forward(p, toy_batch).explore.data, forward(alt, toy_batch).explore.data)


# -- checkpoints ------------------------------------------------------------


def saved(tmp_path, dtype="float64", with_state=True):
    p = init_params(5, d_emb=3, d_hid=4, seed=9)
    state = AdamState.fresh(p)
    for _, t in p.named_parameters():
        t.grad = np.ones_like(t.data)
    adam_step(p, state, TrainConfig())
    vocab = Vocabulary([f"i{k}" for k in range(5)], [1] * 5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, state if with_state else None, TrainConfig(d_emb=3, d_hid=4), vocab, dtype=dtype)
    return path, p, state


def test_checkpoint_roundtrip_exact(tmp_path):
    path, p, state = saved(tmp_path)
    assert path.read_bytes()[:8] == b"RPNCKPT1"
    ck = load_checkpoint(path, expected_shapes=param_shapes(5, 3, 4))
    for (n, a), (_, b) in zip(p.named_parameters(), ck.params.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    assert ck.state.step == 1
    for n in state.m:
        assert np.array_equal(state.m[n], ck.state.m[n])
        assert np.array_equal(state.v[n], ck.state.v[n])
    assert ck.config == TrainConfig(d_emb=3, d_hid=4)
    assert ck.vocab == [f"i{k}" for k in range(5)]
    names = [e["name"] for e in ck.header["manifest"]]
    assert set(p.shapes()) <= set(names)


def test_checkpoint_float32(tmp_path):
    path, p, _ = saved(tmp_path, dtype="float32", with_state=False)
    ck = load_checkpoint(path)
    assert ck.state is None
    for (n, a), (_, b) in zip(p.named_parameters(), ck.params.named_parameters()):
        np.testing.assert_array_equal(b.data, a.data.astype(np.float32).astype(np.float64))


def test_checkpoint_shape_mismatch_names_parameter(tmp_path):
    p = init_params(50, d_emb=3, d_hid=3, seed=0)
    save_checkpoint(tmp_path / "m.ckpt", p)
    with pytest.raises(CheckpointShapeError, match=r"explore\.W_c_e") as info:
        load_checkpoint(tmp_path / "m.ckpt", expected_shapes=param_shapes(60, 3, 3))
    assert "embedding.weight" in str(info.value)


def test_checkpoint_truncation(tmp_path):
    path, _, _ = saved(tmp_path)
    data = path.read_bytes()
    for cut in (4, 14, 40, len(data) - 1):
        (tmp_path / "cut.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_version_and_garbage(tmp_path):
    path, _, _ = saved(tmp_path)
    data = bytearray(path.read_bytes())
    data[8] = 2
    (tmp_path / "v2.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v2.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a model")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
