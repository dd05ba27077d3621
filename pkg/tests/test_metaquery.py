import numpy as np
import pytest

from unicom import numerics as nx
from unicom import toydata as td
from unicom.checkpoint import params_hash, read_metrics
from unicom.decoder import load_stage1
from unicom.metaquery import (MetaQueryConfig, MetaQueryModel, edit_from_queries, edit_prefix, flow_loss,
                              generate_from_queries, i2i_prefix, load_metaquery, t2i_prefix, train_metaquery)
from unicom.sampling import SamplerConfig
from unicom.transfusion import load_unified

TINY = dict(depth=1, heads=2, n_queries=16, connector_depth=1, steps=4, batch_size=2, warmup=1, train_size=100,
            edit_size=16, eval_size=4, eval_every=2)


@pytest.fixture(scope="module")
def model(tiny_trunk):
    backbone, _ = load_unified(tiny_trunk)
    return MetaQueryModel(MetaQueryConfig(backbone=str(tiny_trunk), **TINY), backbone, 8, 64)


def _prompts(k):
    return [c for _, c in td.generate_corpus(2, k)]


def test_query_states_shape_and_prompt_dependence(model):
    with nx.no_grad():
        h = model.extract_condition(t2i_prefix(_prompts(6))).data
    assert h.shape == (6, 16, model.backbone.cfg.width)
    dists = [np.linalg.norm(h[i] - h[j]) for i in range(6) for j in range(i + 1, 6)]
    assert min(dists) > 0


def test_query_values_change_query_states(model):
    ids = t2i_prefix(_prompts(1))
    base = model.queries.data.copy()
    with nx.no_grad():
        a = model.extract_condition(ids).data
        model.queries.data = base + 1.0
        b = model.extract_condition(ids).data
    model.queries.data = base
    assert np.abs(a - b).max() > 0


def test_length_cap(model):
    ids = np.zeros((1, model.backbone.cfg.max_len), dtype=np.int64)
    with pytest.raises(ValueError):
        model.extract_condition(ids)


def test_image_prefixes(model):
    ctx = np.zeros((2, 64, 8), np.float32)
    ids = edit_prefix([td.tokenize("remove 0 0")] * 2, 64)
    assert ids.shape == (2, 1 + 66 + td.MAX_INSTRUCTION_LEN)
    with nx.no_grad():
        assert model.extract_condition(ids, ctx).shape == (2, 16, model.backbone.cfg.width)
        assert model.extract_condition(i2i_prefix(2, 64), ctx).shape == (2, 16, model.backbone.cfg.width)


def test_backbone_gets_no_gradient(model, rng):
    head = model.predictor.vel_head.weight
    saved = head.data.copy()
    head.data[:] = rng.standard_normal(head.shape)  # the zero-initialised head would block all gradients
    z1 = rng.standard_normal((2, 64, 8)).astype(np.float32)
    loss = flow_loss(model, t2i_prefix(_prompts(2)), z1, np.array([0.3, 0.8]), np.zeros_like(z1))
    grads = nx.backward(loss, model.backbone.parameters() + [model.queries])
    assert all(p.grad is None or not np.any(p.grad) for p in model.backbone.parameters())
    assert np.any(model.queries.grad)
    assert grads
    head.data[:] = saved


def test_train_metaquery(tiny_stage1, tiny_trunk, tmp_path):
    before = params_hash(load_unified(tiny_trunk)[0].named_parameters())
    cfg = MetaQueryConfig(backbone=str(tiny_trunk), **TINY)
    res = train_metaquery(cfg, tiny_stage1, tmp_path / "a")
    assert res.frozen_ok
    assert params_hash(load_unified(tiny_trunk)[0].named_parameters()) == before
    assert [r["step"] for r in read_metrics(res.metrics_path)] == [0, 2, 4]
    again = train_metaquery(cfg, tiny_stage1, tmp_path / "b")
    assert again.checkpoint.read_bytes() == res.checkpoint.read_bytes()

    stage1 = load_stage1(tiny_stage1)
    loaded, header = load_metaquery(res.checkpoint)
    assert header["stage1"]["sha256"] == stage1.sha256
    sampler = SamplerConfig(steps=2, pixel_steps=2, seed=3)
    img = generate_from_queries(td.prompt_tokens("red square at 0 0"), stage1, loaded, sampler)
    assert img.shape == (32, 32, 3) and img.min() >= 0 and img.max() <= 1
    assert img.tobytes() == generate_from_queries(td.prompt_tokens("red square at 0 0"), stage1, loaded,
                                                  sampler).tobytes()
    src = td.render(td.generate_corpus(0, 1)[0][0])
    out = edit_from_queries(src[None], [td.tokenize("keep")], stage1, loaded, sampler)
    assert out.shape == (1, 32, 32, 3)


def test_needs_backbone(tiny_stage1, tmp_path):
    with pytest.raises(ValueError):
        train_metaquery(MetaQueryConfig(**TINY), tiny_stage1, tmp_path)


def test_query_mask_layout(model, monkeypatch):
    seen = {}
    run = model.backbone.run

    def spy(h, mask):
        seen["mask"] = mask
        return run(h, mask)

    monkeypatch.setattr(model.backbone, "run", spy)
    ids = t2i_prefix(_prompts(1))
    length = ids.shape[1]
    with nx.no_grad():
        model.extract_condition(ids)
    mask = seen["mask"]
    assert not mask[:length, length:].any()  # text never attends to the queries
    assert mask[length:, :].all()  # queries see the prefix and each other
    assert np.array_equal(mask[:length, :length], np.tril(np.ones((length, length), bool)))
