"""UNet denoiser: token encoding, cross-attention, tracing, parameter views."""
import math

import numpy as np
import pytest

from layoutflow import tensor as T
from layoutflow.tensor import Tensor
from layoutflow.denoiser import (
    AttentionTrace,
    Denoiser,
    UNetConfig,
    cross_attention,
    init_params,
    sinusoid_table,
)
from layoutflow.tokens import CONTEXT_LEN, VOCAB_SIZE


TINY = UNetConfig(channels=(8, 8, 8), d_model=8, d_head=8, num_groups=4, temb_dim=8, temb_hidden=16)


@pytest.fixture(scope="module")
def tiny():
    return Denoiser.create(TINY, seed=0)


@pytest.fixture(scope="module")
def full():
    return Denoiser.create(UNetConfig(), seed=0)


def batch(model, b=1, seed=0):
    g = np.random.default_rng(seed)
    r = model.cfg.resolution
    return Tensor(g.standard_normal((b, r, r, model.cfg.in_channels), dtype=np.float32))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def test_full_model_parameter_count(full):
    total = sum(p.data.size for p in full.params.values())
    assert total == 1_187_971


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(resolution=30)
    with pytest.raises(ValueError):
        UNetConfig(channels=(30, 64, 128))
    with pytest.raises(ValueError):
        UNetConfig(t_train=1)


def test_init_deterministic():
    a = init_params(TINY, seed=7)
    b = init_params(TINY, seed=7)
    assert sorted(a) == sorted(b)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_config_meta_roundtrip():
    cfg = UNetConfig()
    assert UNetConfig.from_meta(cfg.to_meta()) == cfg


# ---------------------------------------------------------------------------
# token encoding
# ---------------------------------------------------------------------------


def test_encode_tokens_deterministic(tiny):
    a = tiny.encode_tokens((2, 5))
    b = tiny.encode_tokens((2, 5))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.shape == (2, TINY.d_model)


def test_encode_tokens_rejects_bad_ids(tiny):
    with pytest.raises(ValueError):
        tiny.encode_tokens(())
    with pytest.raises(Exception):
        tiny.encode_tokens((VOCAB_SIZE,))
    with pytest.raises(ValueError):
        tiny.encode_tokens(tuple(range(CONTEXT_LEN + 1)))


def test_encode_tokens_position_matters(tiny):
    ab = tiny.encode_tokens((2, 5))
    ba = tiny.encode_tokens((5, 2))
    assert not np.array_equal(ab.data[0, 0], ba.data[0, 1])


def test_encode_tokens_gradient_is_row_sparse(tiny):
    table = tiny.params["tok.table"]
    table.requires_grad = True
    try:
        cond = tiny.encode_tokens((2, 5))
        T.backward((cond * cond).sum())
        g = table.grad
        touched = {i for i in range(VOCAB_SIZE) if np.abs(g[i]).max() > 0}
        assert touched == {2, 5}
    finally:
        table.requires_grad = False
        table.grad = None


# ---------------------------------------------------------------------------
# cross-attention
# ---------------------------------------------------------------------------


def attn_params(c, L, d_model, d_head, seed=0):
    g = np.random.default_rng(seed)
    mk = lambda *s: Tensor(g.standard_normal(s, dtype=np.float32) * 0.2)
    return mk(c, d_head), mk(d_model, d_head), mk(d_model, c), mk(c, c)


def test_attention_single_token_all_ones():
    feat = Tensor(np.random.default_rng(1).standard_normal((1, 4, 4, 8), dtype=np.float32))
    cond = Tensor(np.random.default_rng(2).standard_normal((1, 1, 8), dtype=np.float32))
    wq, wk, wv, wo = attn_params(8, 1, 8, 8)
    _, attn = cross_attention(feat, cond, wq, wk, wv, wo, d_head=8)
    np.testing.assert_allclose(attn.data, 1.0, atol=1e-7)


def test_attention_identical_keys_uniform():
    feat = Tensor(np.random.default_rng(3).standard_normal((1, 4, 4, 8), dtype=np.float32))
    row = np.random.default_rng(4).standard_normal((1, 8)).astype(np.float32)
    cond = Tensor(np.repeat(row[None], 3, axis=1))
    wq, wk, wv, wo = attn_params(8, 3, 8, 8)
    _, attn = cross_attention(feat, cond, wq, wk, wv, wo, d_head=8)
    np.testing.assert_allclose(attn.data, 1.0 / 3.0, atol=1e-6)


def test_attention_closed_form_two_tokens():
    # one position, two tokens, logits [0, ln 3] -> [0.25, 0.75]
    d = 1
    feat = Tensor(np.ones((1, 1, 1, 1), np.float32))
    wq = Tensor(np.ones((1, d), np.float32))
    # keys chosen so q.k = 0 and ln(3) after 1/sqrt(d_head)=1 scaling
    cond = Tensor(np.array([[[0.0], [math.log(3.0)]]], np.float32))
    wk = Tensor(np.ones((1, d), np.float32))
    wv = Tensor(np.ones((1, 1), np.float32))
    wo = Tensor(np.ones((1, 1), np.float32))
    _, attn = cross_attention(feat, cond, wq, wk, wv, wo, d_head=1)
    np.testing.assert_allclose(attn.data[0, 0, 0], [0.25, 0.75], atol=1e-6)


def test_attention_rows_sum_to_one(tiny):
    z = batch(tiny)
    cond = tiny.encode_tokens((2, 5, 14))
    _, trace = tiny.forward(z, 500, cond, record=True)
    for amap in trace.maps:
        np.testing.assert_allclose(np.sum(amap.data, axis=2), 1.0, atol=1e-5)


def test_attention_token_permutation_equivariance(tiny):
    # swapping two condition rows swaps the attention channels
    z = batch(tiny, seed=5)
    rows = np.random.default_rng(6).standard_normal((1, 3, TINY.d_model)).astype(np.float32)
    swapped = rows[:, [1, 0, 2], :]
    _, tr_a = tiny.forward(z, 300, Tensor(rows), record=True)
    _, tr_b = tiny.forward(z, 300, Tensor(swapped), record=True)
    for ma, mb in zip(tr_a.maps, tr_b.maps):
        np.testing.assert_allclose(ma.data[..., 0], mb.data[..., 1], atol=1e-6)
        np.testing.assert_allclose(ma.data[..., 2], mb.data[..., 2], atol=1e-6)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_zero_init_head(tiny):
    z = batch(tiny)
    eps, _ = tiny.forward(z, 100, tiny.encode_tokens((2,)), record=False)
    np.testing.assert_array_equal(eps.data, 0.0)


def test_forward_record_is_observation_only(tiny):
    z = batch(tiny, seed=7)
    cond = tiny.encode_tokens((2, 5))
    eps_a, trace_a = tiny.forward(z, 42, cond, record=False)
    eps_b, trace_b = tiny.forward(z, 42, cond, record=True)
    assert trace_a is None and trace_b is not None
    np.testing.assert_array_equal(eps_a.data, eps_b.data)


def test_forward_trace_records_mid_resolution_only(tiny):
    z = batch(tiny, seed=8)
    _, trace = tiny.forward(z, 10, tiny.encode_tokens((2, 5)), record=True)
    mid = TINY.resolution // 2
    assert len(trace.maps) == 4
    for amap in trace.maps:
        assert amap.shape[:2] == (mid, mid)


def test_forward_shape_and_range_checks(tiny):
    cond = tiny.encode_tokens((2,))
    bad = Tensor(np.zeros((1, 8, 8, 3), np.float32))
    with pytest.raises(Exception):
        tiny.forward(bad, 10, cond, record=False)
    z = batch(tiny)
    with pytest.raises(ValueError):
        tiny.forward(z, TINY.t_train, cond, record=False)
    with pytest.raises(ValueError):
        tiny.forward(z, -1, cond, record=False)


def test_forward_deterministic(tiny):
    z = batch(tiny, seed=9)
    cond = tiny.encode_tokens((2, 5))
    a, _ = tiny.forward(z, 77, cond, record=False)
    b, _ = tiny.forward(z, 77, cond, record=False)
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_differentiable_wrt_latent():
    cfg = UNetConfig(resolution=8, channels=(4, 4, 4), d_model=4, d_head=4,
                     num_groups=2, temb_dim=4, temb_hidden=8)
    with T.high_precision():
        model = Denoiser.create(cfg, seed=1)
        cond = model.encode_tokens((2, 5))

        def f(z):
            eps, _ = model.forward(z, 123, cond, record=False)
            return (eps * eps).sum()

        z0 = np.random.default_rng(10).standard_normal((1, 8, 8, 3))
        report = T.grad_check(f, Tensor(z0, requires_grad=True))
    assert report.passed, report.max_rel_error


def test_timestep_changes_output(tiny):
    z = batch(tiny, seed=11)
    cond = tiny.encode_tokens((2, 5))
    # zero-init head keeps eps at 0; compare an internal activation instead
    tr_a = tiny.forward(z, 0, cond, record=True)[1]
    tr_b = tiny.forward(z, 999, cond, record=True)[1]
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(tr_a.maps, tr_b.maps))


def test_sinusoid_table_shape_and_range():
    tab = sinusoid_table(1000, 64)
    assert tab.shape == (1000, 64)
    assert np.abs(tab).max() <= 1.0 + 1e-6
    assert not np.array_equal(tab[0], tab[999])


# ---------------------------------------------------------------------------
# parameter views
# ---------------------------------------------------------------------------


def test_kv_view_counts_attention_layers(full):
    # 6 cross-attention layers (4 at res 16, 2 at res 8), K and V each
    kv = full.kv_param_view()
    assert len(kv) == 12
    assert all(name.endswith(".k") or name.endswith(".v") for name in kv)


def test_kv_view_tiny_counts(tiny):
    assert len(tiny.kv_param_view()) == 12


def test_kv_view_disjoint_from_conv(tiny):
    kv = set(tiny.kv_param_view())
    conv = [n for n in tiny.param_names() if ".conv" in n or n == "out.w"]
    assert not kv.intersection(conv)


def test_frozen_view_shares_data_without_grad(tiny):
    frozen = tiny.frozen_view()
    for name in tiny.param_names():
        assert frozen.params[name].data is tiny.params[name].data
        assert not frozen.params[name].requires_grad


def test_trace_summed_slices_token_channel():
    maps = [Tensor(np.random.default_rng(i).random((4, 4, 3)).astype(np.float32)) for i in range(2)]
    trace = AttentionTrace(maps=maps)
    s = trace.summed(1)
    expect = maps[0].data[..., 1] + maps[1].data[..., 1]
    np.testing.assert_allclose(s.data, expect, atol=1e-6)
