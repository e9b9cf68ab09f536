import math

import numpy as np
import pytest

from gradattn import tensor as T
from gradattn.attention import (
    AttentionParams,
    EncoderConfig,
    apply_learnable_pe,
    apply_rope,
    encoder_forward,
    init_encoder,
    multi_head_attention,
    scaled_dot_attention,
)
from gradattn.errors import ContractError
from gradattn.tensor import Tensor, finite_diff_check


@pytest.fixture(autouse=True)
def f64():
    with T.precision("float64"):
        yield


def reference_mha(z, p, heads):
    """Per-sample, per-head loops with explicit softmax; no shared helpers."""
    B, Tn, d = z.shape
    dh = d // heads
    q = z @ p.q.weight.data.T + p.q.bias.data
    k = z @ p.k.weight.data.T + p.k.bias.data
    v = z @ p.v.weight.data.T + p.v.bias.data
    ctx = np.zeros_like(z)
    for b in range(B):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[b, :, sl] @ k[b, :, sl].T / math.sqrt(dh)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            ctx[b, :, sl] = (e / e.sum(axis=1, keepdims=True)) @ v[b, :, sl]
    return ctx @ p.o.weight.data.T + p.o.bias.data


def _random_attn(seed, d=8):
    rng = np.random.default_rng(seed)
    p = AttentionParams.init(rng, d)
    for lp in (p.q, p.k, p.v, p.o):
        lp.bias.data = rng.normal(0, 0.3, d)
    return rng, p


@pytest.mark.parametrize("seed", range(5))
def test_mha_matches_unfused_reference(seed):
    rng, p = _random_attn(seed)
    z = rng.normal(size=(1, 5, 8))
    got = multi_head_attention(Tensor(z), p, heads=2).data
    assert np.max(np.abs(got - reference_mha(z, p, 2))) < 1e-6


def test_mha_batched_reference():
    rng, p = _random_attn(9, d=16)
    z = rng.normal(size=(3, 5, 16))
    assert np.max(np.abs(multi_head_attention(Tensor(z), p, heads=4).data - reference_mha(z, p, 4))) < 1e-6


def test_attention_uniform_when_qk_zero():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 1, 4, 3))
    zeros = Tensor(np.zeros((1, 1, 4, 3)))
    out, w = scaled_dot_attention(zeros, zeros, Tensor(v))
    np.testing.assert_allclose(w.data, 0.25, atol=1e-15)
    np.testing.assert_allclose(out.data[0, 0], np.tile(v[0, 0].mean(axis=0), (4, 1)), atol=1e-12)


def test_attention_identical_values():
    rng = np.random.default_rng(1)
    vrow = rng.normal(size=3)
    out, _ = scaled_dot_attention(Tensor(rng.normal(size=(1, 4, 3))), Tensor(rng.normal(size=(1, 4, 3))),
                                  Tensor(np.tile(vrow, (1, 4, 1))))
    np.testing.assert_allclose(out.data[0], np.tile(vrow, (4, 1)), atol=1e-12)


def test_attention_hand_case():
    q = Tensor([[[1.0], [0.0]]])
    k = Tensor([[[1.0], [0.0]]])
    v = Tensor([[[2.0], [4.0]]])
    out, w = scaled_dot_attention(q, k, v)
    w0 = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    np.testing.assert_allclose(w.data[0, 0], w0, atol=1e-6)
    np.testing.assert_allclose(w.data[0, 1], [0.5, 0.5], atol=1e-6)
    np.testing.assert_allclose(out.data[0, :, 0], [w0 @ [2, 4], 3.0], atol=1e-6)


def test_attention_weights_row_stochastic():
    rng, p = _random_attn(3)
    _, w = multi_head_attention(Tensor(rng.normal(0, 3, size=(2, 5, 8))), p, heads=2, return_weights=True)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_mha_zero_weights_give_zero():
    p = AttentionParams.init(np.random.default_rng(0), 8)
    for lp in (p.q, p.k, p.v, p.o):
        lp.weight.data[:] = 0
        lp.bias.data[:] = 0
    out = multi_head_attention(Tensor(np.random.default_rng(1).normal(size=(2, 5, 8))), p, heads=2)
    assert np.all(out.data == 0)


def test_single_head_path():
    rng, p = _random_attn(4)
    z = rng.normal(size=(2, 5, 8))
    out = multi_head_attention(Tensor(z), p, heads=1).data
    np.testing.assert_array_equal(out, multi_head_attention(Tensor(z), p, heads=1).data)
    assert np.max(np.abs(out - reference_mha(z, p, 1))) < 1e-10


def test_learnable_pe_examples():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, 5, 8))
    np.testing.assert_array_equal(apply_learnable_pe(Tensor(z), Tensor(np.zeros((5, 8)))).data, z)
    table = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(apply_learnable_pe(Tensor(np.zeros((2, 5, 8))), Tensor(table)).data[1], table)
    t = Tensor(table, requires_grad=True)
    T.backward(T.sum_(apply_learnable_pe(Tensor(np.zeros((1, 5, 8))), t)))
    np.testing.assert_array_equal(t.grad, np.ones((5, 8)))


def test_rope_examples():
    x = np.random.default_rng(6).normal(size=(2, 3, 5, 8))
    out = apply_rope(Tensor(x)).data
    np.testing.assert_array_equal(out[..., 0, :], x[..., 0, :])
    pair_in = np.hypot(x[..., 0::2], x[..., 1::2])
    pair_out = np.hypot(out[..., 0::2], out[..., 1::2])
    np.testing.assert_allclose(pair_out, pair_in, atol=1e-6)
    v = np.zeros((1, 1, 2, 2))
    v[0, 0, 1] = [1.0, 0.0]
    np.testing.assert_allclose(apply_rope(Tensor(v)).data[0, 0, 1], [math.cos(1), math.sin(1)], atol=1e-12)


def test_rope_scores_depend_on_relative_position():
    rng = np.random.default_rng(7)
    q, k = rng.normal(size=4), rng.normal(size=4)

    def score(m, n):
        qs = np.zeros((1, 1, 10, 4))
        ks = np.zeros((1, 1, 10, 4))
        qs[0, 0, m], ks[0, 0, n] = q, k
        return apply_rope(Tensor(qs)).data[0, 0, m] @ apply_rope(Tensor(ks)).data[0, 0, n]

    assert abs(score(3, 1) - score(7, 5)) < 1e-12
    assert abs(score(3, 1) - score(1, 3)) > 1e-6


def test_rope_rejects_odd_dim():
    with pytest.raises(ContractError):
        apply_rope(Tensor(np.zeros((1, 1, 2, 3))))


def test_encoder_config_contract():
    with pytest.raises(ContractError):
        EncoderConfig(depth=0)
    with pytest.raises(ContractError):
        EncoderConfig(dim=10, heads=4)
    with pytest.raises(ContractError):
        EncoderConfig(pe_variant="sinusoid")
    assert EncoderConfig().head_dim == 32


def test_encoder_zero_sublayers_is_identity():
    cfg = EncoderConfig(depth=2, heads=2, dim=8, ffn_dim=16)
    params = init_encoder(np.random.default_rng(0), cfg)
    for b in params.blocks:
        for lp in (b.attn.q, b.attn.k, b.attn.v, b.attn.o, b.ffn1, b.ffn2):
            lp.weight.data[:] = 0
            lp.bias.data[:] = 0
    z = np.random.default_rng(1).normal(size=(2, 5, 8))
    np.testing.assert_array_equal(encoder_forward(Tensor(z), cfg, params).data, z)


@pytest.mark.parametrize("pe", ["nope", "learnable", "rope"])
def test_encoder_gradcheck(pe):
    rng = np.random.default_rng(2)
    cfg = EncoderConfig(depth=1, heads=2, dim=8, ffn_dim=16, pe_variant=pe)
    params = init_encoder(rng, cfg)
    z = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    r = rng.normal(size=(2, 5, 8))
    ps = [z] + [t for b in params.blocks for t in (b.ln1.gamma, b.attn.q.weight, b.attn.k.weight, b.ffn1.weight)]
    if params.pe_table is not None:
        ps.append(params.pe_table)
    assert finite_diff_check(lambda _: T.sum_(T.mul(encoder_forward(z, cfg, params), r)), ps) < 1e-5


def permutation_gap(pe, seed):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(depth=2, heads=2, dim=8, ffn_dim=16, pe_variant=pe)
    params = init_encoder(rng, cfg)
    if params.pe_table is not None:
        params.pe_table.data = rng.normal(0, 0.5, params.pe_table.shape)
    z = rng.normal(size=(1, 5, 8))
    perm = rng.permutation(5)
    while np.all(perm == np.arange(5)):
        perm = rng.permutation(5)
    out = encoder_forward(Tensor(z), cfg, params).data
    out_perm = encoder_forward(Tensor(z[:, perm]), cfg, params).data
    return float(np.max(np.abs(out[:, perm] - out_perm)))


@pytest.mark.parametrize("seed", range(5))
def test_nope_is_permutation_equivariant(seed):
    assert permutation_gap("nope", seed) < 1e-5


@pytest.mark.parametrize("pe", ["learnable", "rope"])
def test_positional_variants_break_equivariance(pe):
    assert max(permutation_gap(pe, s) for s in range(5)) > 1e-3
