
import numpy as np
import pytest

from synergy_moe.errors import DimensionError, ParameterError
from synergy_moe.model import (
    PARAM_GROUPS,
    ModelConfig,
    forward,
    init_model,
    text_cross_entropy,
    upcycle_model,
)
from synergy_moe.moe import min_topk_gap
from synergy_moe.tensor import Tensor, grad_check

SMALL = dict(d_vis=6, d_model=16, d_hidden=12, vocab=16, total_layers=2, schedule="full", num_experts=4, top_k=2,
             synergy_tokens=2, temporal_dim=3, spatial_dim=3)


def test_text_only_forward():
    cfg = ModelConfig(**SMALL)
    m = init_model(cfg, 0)
    out = forward(m, np.zeros((0, cfg.d_vis)), [0, 3, 5])
    assert out.logits.shape == (3, cfg.vocab) and out.num_visual == 0
    assert text_cross_entropy(out, [0, 3, 5]).shape == ()


def test_shapes_with_visual_and_synergy():
    cfg = ModelConfig(**SMALL)
    m = init_model(cfg, 1)
    upcycle_model(m, 0.0, 2)
    out = forward(m, np.ones((4, cfg.d_vis)), [0, 1, 2], synergy_count=2)
    assert out.logits.shape == (9, cfg.vocab)
    assert out.synergy.hidden.shape == (2, cfg.d_model)
    assert len(out.records) == 2


def test_zeroed_attention_and_ffn_is_residual():
    cfg = ModelConfig(**{**SMALL, "total_layers": 1})
    m = init_model(cfg, 3)
    b = m.blocks[0]
    for t in (b.wq, b.wk, b.wv, b.wo, b.ffn.w_down):
        t.data[...] = 0.0
    out = forward(m, np.zeros((0, cfg.d_vis)), [4, 7])
    emb = m.token_embedding.data[[4, 7]]
    mu = emb.mean(1, keepdims=True)
    expect = (emb - mu) / np.sqrt(((emb - mu) ** 2).mean(1, keepdims=True) + cfg.ln_eps)
    assert np.allclose(out.hidden.data, expect, atol=1e-12)
    assert out.logits.shape == (2, cfg.vocab)


def test_causality():
    cfg = ModelConfig(**SMALL)
    m = init_model(cfg, 4)
    a = forward(m, np.zeros((0, cfg.d_vis)), [1, 2, 3, 4]).logits.data
    b = forward(m, np.zeros((0, cfg.d_vis)), [1, 2, 9, 9]).logits.data
    assert np.array_equal(a[:2], b[:2])


def test_upcycled_model_matches_dense_at_zero_noise():
    cfg = ModelConfig(**SMALL)
    dense = init_model(cfg, 5)
    moe = init_model(cfg, 5)
    upcycle_model(moe, 0.0, 9)
    for _, layer in moe.moe_layers():
        layer.router.w_router.data[...] = np.random.default_rng(0).normal(size=layer.router.w_router.shape)
    vis = np.random.default_rng(1).normal(size=(3, cfg.d_vis))
    a = forward(dense, vis, [0, 4, 2]).logits.data
    b = forward(moe, vis, [0, 4, 2]).logits.data
    assert np.max(np.abs(a - b)) < 1e-12


def test_input_validation():
    cfg = ModelConfig(**SMALL)
    m = init_model(cfg, 6)
    with pytest.raises(ParameterError):
        forward(m, np.zeros((0, cfg.d_vis)), [cfg.vocab])
    with pytest.raises(DimensionError):
        forward(m, Tensor(np.zeros((2, cfg.d_vis + 1))), [0, 1])
    with pytest.raises(ParameterError):
        ModelConfig(d_model=15, n_heads=2)
    with pytest.raises(ParameterError):
        ModelConfig(top_k=5, num_experts=4)


def test_every_parameter_in_exactly_one_group():
    cfg = ModelConfig(**SMALL)
    m = init_model(cfg, 7)
    upcycle_model(m, 0.01, 1)
    names = [n for n, _, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert {g for _, g, _ in m.named_parameters()} == set(PARAM_GROUPS)
    ids = [id(t) for _, _, t in m.named_parameters()]
    assert len(ids) == len(set(ids))


def test_state_round_trip():
    cfg = ModelConfig(**SMALL)
    a, b = init_model(cfg, 8), init_model(cfg, 9)
    b.load_state(a.state())
    for (_, _, x), (_, _, y) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(x.data, y.data)


def test_end_to_end_cross_entropy_gradient():
    """L=2, d=16, M=4, k=2: cross-entropy gradient w.r.t. every parameter group."""
    cfg = ModelConfig(**SMALL)
    for seed in range(30):
        rng = np.random.default_rng(seed)
        m = init_model(cfg, seed)
        upcycle_model(m, 0.3, seed)
        for _, layer in m.moe_layers():
            layer.router.w_router.data[...] = rng.normal(size=layer.router.w_router.shape)
        vis = rng.normal(size=(2, cfg.d_vis))
        ids = [int(t) for t in rng.integers(0, cfg.vocab, size=4)]
        out = forward(m, vis, ids)
        if min(min_topk_gap(r.probs.data, 2) for r in out.records) < 1e-3:
            continue
        params = [t for _, g, t in m.named_parameters() if g not in ("alignment",)]
        err = grad_check(lambda: text_cross_entropy(forward(m, vis, ids), ids), params, max_coords=3, seed=seed)
        assert err < 1e-4
        return
    pytest.fail("no untied draw found")
