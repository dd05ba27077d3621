import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unicom import numerics as nx
from unicom import toydata as td
from unicom.checkpoint import read_metrics
from unicom.decoder import load_stage1
from unicom.numerics import Tensor
from unicom.transfusion import (LATENT, TEXT, MaskError, MixedSequence, UnifiedConfig, UnifiedModel,
                                UnifiedTrainConfig, build_mask, condition_on_image, edit_batch, find_blocks,
                                i2t_batch, joint_loss, load_trunk_into, load_unified, pretrain_trunk,
                                steps_to_tau, t2i_batch, text_batch, train_unified)

W0, W1, W6 = td.TOK["red"], td.TOK["square"], td.TOK["at"]

# [w0, w1, BOI, z3, z4, EOI, w6]
EXAMPLE_MASK = np.array([
    [1, 0, 0, 0, 0, 0, 0],
    [1, 1, 0, 0, 0, 0, 0],
    [1, 1, 1, 0, 0, 0, 0],
    [1, 1, 1, 1, 1, 0, 0],
    [1, 1, 1, 1, 1, 0, 0],
    [1, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1],
], dtype=bool)


def example_sequence():
    return MixedSequence.build([("text", [W0, W1]), ("image", 2, "target"), ("text", [W6])])


def test_example_mask_exact():
    mask = build_mask(example_sequence())
    assert mask.dtype == bool
    assert np.array_equal(mask, EXAMPLE_MASK)
    assert mask[3, 4] and mask[4, 3]
    assert not mask[0, 1] and mask[1, 0]
    assert not mask[3, 5] and mask[6, 4]


@st.composite
def sequences(draw):
    parts = []
    for _ in range(draw(st.integers(1, 5))):
        if draw(st.booleans()):
            parts.append(("text", draw(st.lists(st.integers(5, 22), min_size=1, max_size=5))))
        else:
            parts.append(("image", draw(st.integers(1, 6)), "target"))
    return MixedSequence.build(parts)


def check_mask_invariants(seq, mask):
    s = seq.length
    block_of = {}
    for b in seq.blocks:
        for i in range(b.start, b.stop):
            block_of[i] = b
    for i in range(s):
        horizon = block_of[i].stop - 1 if i in block_of else i
        for j in range(s):
            if i not in block_of and j not in block_of:
                assert mask[i, j] == (j <= i)  # causal on text-like positions
            if i in block_of:
                b = block_of[i]
                assert mask[i, j] == (j < b.start or b.start <= j < b.stop)  # own block + strict prefix
            if j > horizon:
                assert not mask[i, j]  # nothing past the horizon


def test_mask_invariants_on_100_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        parts = []
        for _ in range(int(rng.integers(1, 6))):
            if rng.random() < 0.5:
                parts.append(("text", list(rng.integers(5, 23, int(rng.integers(1, 6))))))
            else:
                parts.append(("image", int(rng.integers(1, 7)), "target"))
        seq = MixedSequence.build(parts)
        check_mask_invariants(seq, build_mask(seq))


@settings(max_examples=50, deadline=None)
@given(sequences())
def test_mask_invariants_property(seq):
    check_mask_invariants(seq, build_mask(seq))


@pytest.mark.parametrize("tokens,tags", [
    ([td.BOI, td.PAD, td.PAD], [TEXT, LATENT, LATENT]),                      # unclosed
    ([W0, td.EOI], [TEXT, TEXT]),                                             # stray EOI
    ([td.BOI, td.BOI, td.PAD, td.EOI], [TEXT, TEXT, LATENT, TEXT]),           # nested
    ([W0, td.PAD, W1], [TEXT, LATENT, TEXT]),                                 # slot outside
    ([td.BOI, td.PAD, W0, td.EOI], [TEXT, LATENT, TEXT, TEXT]),               # text inside
])
def test_malformed_sequences_raise(tokens, tags):
    seq = MixedSequence(np.array(tokens), np.array(tags, dtype=np.int8))
    with pytest.raises(MaskError):
        build_mask(seq)


def test_find_blocks_matches_builder():
    seq = example_sequence()
    assert [(b.boi, b.eoi) for b in find_blocks(seq.tokens, seq.tags)] == [(2, 5)]
    assert seq.blocks[0].size == 2


def _model(**kw):
    return UnifiedModel(UnifiedConfig(width=16, depth=2, heads=2, n_slots=4, max_len=40, **kw))


def _captions(k):
    return [c for _, c in td.generate_corpus(0, k)]


def test_perfect_velocity_and_uniform_logits():
    model = _model()
    model.text_head.weight.data[:] = 0
    model.text_head.bias.data[:] = 0
    z1 = np.zeros((2, 4, 8), np.float32)
    eps = np.zeros_like(z1)
    losses = joint_loss(model, t2i_batch(_captions(2), z1, np.array([0.3, 0.6]), eps))
    assert float(losses.fm.data) == 0.0  # zero head, zero target velocity
    assert float(losses.ce.data) == pytest.approx(math.log(32), abs=1e-6)
    assert losses.has_latent


def test_total_is_five_to_one():
    model = _model()
    model.text_head.weight.data[:] = 0
    model.text_head.bias.data[:] = 0
    # zero velocity head against a constant target of sqrt(0.2) gives L_fm = 0.2
    z1 = np.full((2, 4, 8), math.sqrt(0.2), np.float32)
    losses = joint_loss(model, t2i_batch(_captions(2), z1, np.array([0.5, 0.5]), np.zeros_like(z1)),
                        w_ce=1.0 / math.log(32))
    assert float(losses.fm.data) == pytest.approx(0.2, rel=1e-6)
    assert float(losses.total.data) == pytest.approx(2.0, rel=1e-6)


def test_text_only_batch_flags_no_latent():
    losses = joint_loss(_model(), text_batch(_captions(3)))
    assert not losses.has_latent and float(losses.fm.data) == 0.0


def test_gradient_isolation(rng):
    model = _model()
    model.vel_head.weight.data[:] = rng.standard_normal(model.vel_head.weight.shape)
    z1 = rng.standard_normal((2, 4, 8)).astype(np.float32)
    batch = t2i_batch(_captions(2), z1, np.array([0.2, 0.9]), rng.standard_normal(z1.shape).astype(np.float32))
    vel, txt = model.vel_head.parameters(), model.text_head.parameters()
    nx.backward(joint_loss(model, batch).ce, vel + txt)
    assert all(not np.any(p.grad) for p in vel) and any(np.any(p.grad) for p in txt)
    nx.backward(joint_loss(model, batch).fm, vel + txt)
    assert all(not np.any(p.grad) for p in txt) and any(np.any(p.grad) for p in vel)


def test_teacher_forcing_consistency(rng):
    with nx.precision(np.float64):
        model = _model()
        model.vel_head.weight.data[:] = rng.standard_normal(model.vel_head.weight.shape)
        caps = _captions(4)
        z1 = rng.standard_normal((4, 4, 8))
        batch = t2i_batch(caps, z1, rng.random(4), rng.standard_normal(z1.shape), drop=[False, True, False, False])
        whole = joint_loss(model, batch)
        parts = [joint_loss(model, batch.select(i)) for i in range(4)]
        for key in ("total", "ce", "fm"):
            mean = np.mean([float(getattr(p, key).data) for p in parts])
            assert abs(float(getattr(whole, key).data) - mean) < 1e-6


def test_slot_permutation_equivariance_without_positions(rng):
    with nx.precision(np.float64):
        model = _model(positional=False)
        for blk in model.blocks:
            blk.attn.qkv.weight.data *= 3.0
        z1 = rng.standard_normal((1, 4, 8))
        batch = t2i_batch(_captions(1), z1, np.array([0.4]), rng.standard_normal(z1.shape))
        perm = rng.permutation(4)
        permuted = t2i_batch(_captions(1), z1, np.array([0.4]), np.zeros_like(z1))
        permuted.inputs[0] = batch.inputs[0][:, perm]
        blk = batch.layout.blocks[0]
        with nx.no_grad():
            a = model(batch).data[:, blk.start:blk.stop][:, perm]
            b = model(permuted).data[:, blk.start:blk.stop]
    assert np.abs(a - b).max() < 1e-5


def test_slot_positions_break_symmetry(rng):
    model = _model()
    z = np.zeros((1, 4, 8), np.float32)
    with nx.no_grad():
        h = model.embed_latents(z, np.array([0.5])).data[0]
    assert np.abs(h[0] - h[1]).max() > 0.1


def test_condition_dropout_blanks_caption():
    z1 = np.zeros((2, 4, 8), np.float32)
    batch = t2i_batch(_captions(2), z1, np.array([0.5, 0.5]), z1, drop=[True, False])
    assert list(batch.ids[0, :3]) == [td.BOS, td.EOS, td.PAD]
    assert batch.ce_weights[0].sum() == 0 and batch.ce_weights[1].sum() > 0


def test_layouts():
    z = np.zeros((1, 4, 8), np.float32)
    e = edit_batch([td.tokenize("recolor 0 0 red")], z, z, np.array([0.5]), z)
    assert [b.role for b in e.layout.blocks] == ["context", "target"]
    assert list(e.t) == [1]
    i = i2t_batch(np.zeros((1, 4, 144), np.float32), _captions(1))
    assert i.layout.blocks[0].role == "understand"
    assert float(joint_loss(_model(), i).fm.data) == 0.0


def test_condition_on_image_length(tiny_stage1):
    stage1 = load_stage1(tiny_stage1)
    z, length = condition_on_image(stage1, td.render(td.generate_corpus(0, 1)[0][0]))
    assert z.shape == (64, 8) and length == 66
    with pytest.raises(ValueError):
        condition_on_image(stage1, np.zeros((8, 8, 3)))


def test_steps_to_tau():
    recs = [{"step": 0, "eval_l_fm": 2.0}, {"step": 50, "eval_l_fm": 0.5}, {"step": 100, "eval_l_fm": 0.3}]
    assert steps_to_tau(recs, 0.5) == 50
    assert steps_to_tau(recs, 0.1) == math.inf


TINY_UNIFIED = dict(width=16, depth=1, heads=2, steps=4, batch_size=2, warmup=1, train_size=32, edit_size=16,
                    eval_size=4, eval_every=2)


def test_train_unified_freezes_stage1_and_is_deterministic(tiny_stage1, tmp_path):
    cfg = UnifiedTrainConfig(**TINY_UNIFIED)
    res = train_unified(cfg, tiny_stage1, tmp_path / "a")
    assert res.frozen_ok
    assert [r["step"] for r in read_metrics(res.metrics_path)] == [0, 2, 4]
    again = train_unified(cfg, tiny_stage1, tmp_path / "b")
    assert res.checkpoint.read_bytes() == again.checkpoint.read_bytes()
    model, header = load_unified(res.checkpoint)
    assert header["stage1"]["sha256"] == res.stage1_sha256
    assert model.vel_head.weight.shape == (16, 8)


def test_train_unified_missing_stage1(tmp_path):
    with pytest.raises(FileNotFoundError):
        train_unified(UnifiedTrainConfig(**TINY_UNIFIED), tmp_path / "none.ckpt", tmp_path)


def test_trunk_pretraining_and_transfer(tmp_path):
    cfg = UnifiedTrainConfig(**{**TINY_UNIFIED, "train_size": 100})
    path = pretrain_trunk(cfg, tmp_path / "lm.ckpt", "lm", steps=2)
    model = UnifiedModel(cfg.model_config(8, 64))
    before = model.vel_head.weight.data.copy()
    keys = load_trunk_into(model, path)
    assert "tok.weight" in keys and not any(k.startswith("vel_head") for k in keys)
    assert np.array_equal(model.vel_head.weight.data, before)
    trunk, _ = load_unified(path)
    assert np.array_equal(model.tok.weight.data, trunk.tok.weight.data)
    with pytest.raises(ValueError):
        pretrain_trunk(cfg, tmp_path / "x.ckpt", "other", steps=1)
