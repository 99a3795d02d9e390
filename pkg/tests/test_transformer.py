import numpy as np
import pytest
import torch
from torch import nn

from helpers import fd_check
from pnpt.transformer import (
    Attention,
    AttentionConfig,
    AttentionLayer,
    NumericError,
    PNPTBlock,
    PNPTTrunk,
    SemanticFusion,
    init_semantic_tokens,
)

DIM, HEADS, SEQ, NUM_SEM = 16, 4, 12, 5


def cfg(**kw):
    base = dict(hidden_dim=DIM, heads=HEADS, num_blocks=1, num_semantic_tokens=NUM_SEM)
    base.update(kw)
    return AttentionConfig(**base)


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64).to(dtype)


def zero_weights(module):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "norm" not in name:
                p.zero_()


def ln(x):
    return torch.nn.functional.layer_norm(x, x.shape[-1:])


# --- numpy straight-line oracle -------------------------------------------------

def np_linear(x, lin):
    return x @ lin.weight.detach().double().numpy().T + lin.bias.detach().double().numpy()


def np_ln(x, norm):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + norm.eps) * norm.weight.detach().double().numpy() + norm.bias.detach().double().numpy()


def np_attention(q_in, kv_in, att):
    q, k, v = np_linear(q_in, att.q), np_linear(kv_in, att.k), np_linear(kv_in, att.v)
    d = q.shape[-1] // att.heads
    heads = []
    for h in range(att.heads):
        sl = slice(h * d, (h + 1) * d)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        heads.append(w @ v[:, sl])
    return np_linear(np.concatenate(heads, -1), att.out)


def np_ffn(x, ffn):
    from scipy.special import erf

    h = np_linear(x, ffn[0])
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    return np_linear(h, ffn[2])


def np_layer(x, ctx, layer):
    z = np_ln(np_attention(x, ctx, layer.attn) + x, layer.norm1)
    return np_ln(np_ffn(z, layer.ffn) + z, layer.norm2)


# --- aggregation ----------------------------------------------------------------

def test_zero_weight_aggregate_is_ln_composition():
    block = PNPTBlock(cfg(), 0)
    zero_weights(block)
    x, s = rand(2, SEQ, DIM, seed=1), rand(1, NUM_SEM, DIM, seed=2)
    r, rs = block.aggregate(x, s, branch=0)
    assert r.shape == (2, SEQ, DIM) and rs.shape == (2, NUM_SEM, DIM)
    joint = torch.cat([x, s.expand(2, -1, -1)], 1)
    expected = ln(ln(joint))
    assert torch.allclose(r, expected[:, :SEQ], atol=1e-6)
    assert torch.allclose(rs, expected[:, SEQ:], atol=1e-6)


def _attention_rows(module_fn, modules):
    for m in modules:
        m.keep_weights = True
    module_fn()
    rows = [m.last_weights.sum(-1) for m in modules]
    return max((r - 1).abs().max().item() for r in rows)


def test_all_attention_rows_sum_to_one():
    torch.manual_seed(13)
    trunk = PNPTTrunk(cfg(num_blocks=2))
    e_p, e_s = rand(2, SEQ, DIM, seed=13), rand(2, SEQ, DIM, seed=14)
    err = _attention_rows(lambda: trunk(e_p, e_s), trunk.attention_modules())
    assert len(trunk.attention_modules()) == 2 * 4  # encoder, 2 fusion, decoder per block
    assert err < 1e-6


def test_aggregate_permutation_equivariance():
    torch.manual_seed(3)
    block = PNPTBlock(cfg(), 0)
    x, s = rand(1, SEQ, DIM, seed=4), rand(1, NUM_SEM, DIM, seed=5)
    perm = torch.randperm(SEQ, generator=torch.Generator().manual_seed(6))
    r1, s1 = block.aggregate(x, s, 0)
    r2, s2 = block.aggregate(x[:, perm], s, 0)
    assert (r1[:, perm] - r2).abs().max() < 1e-5
    assert (s1 - s2).abs().max() < 1e-5


def test_aggregate_matches_straight_line_oracle():
    torch.manual_seed(31)
    block = PNPTBlock(cfg(), 0)
    x, s = rand(1, SEQ, DIM, seed=7), rand(1, NUM_SEM, DIM, seed=8)
    r, rs = block.aggregate(x, s, 0)
    joint = np.concatenate([x[0].double().numpy(), s[0].double().numpy()])
    expected = np_layer(joint, joint, block.encoders[0])
    assert np.abs(r[0].detach().numpy() - expected[:SEQ]).max() < 1e-5
    assert np.abs(rs[0].detach().numpy() - expected[SEQ:]).max() < 1e-5


# --- fusion -------------------------------------------------------------------

def test_fusion_zero_weight_symmetric_input():
    fusion = SemanticFusion(DIM, HEADS)
    zero_weights(fusion)
    s = rand(2, NUM_SEM, DIM, seed=9)
    out = fusion(s, s.clone())
    assert out.shape == (2, NUM_SEM, DIM)
    assert torch.allclose(out, ln(ln(s)), atol=1e-6)


@pytest.mark.parametrize("n", [1, 3, 40])
def test_fusion_shape(n):
    fusion = SemanticFusion(DIM, HEADS)
    assert fusion(rand(2, n, DIM), rand(2, n, DIM, seed=1)).shape == (2, n, DIM)


def test_fusion_matches_straight_line_oracle():
    torch.manual_seed(17)
    fusion = SemanticFusion(DIM, HEADS)
    with torch.no_grad():
        for norm in (fusion.norm1, fusion.norm2, fusion.norm3):
            norm.weight.normal_(1.0, 0.1)
            norm.bias.normal_(0.0, 0.1)
    sp, ss = rand(1, NUM_SEM, DIM, seed=17), rand(1, NUM_SEM, DIM, seed=18)
    out = fusion(sp, ss)[0].detach().numpy()
    p, s = sp[0].double().numpy(), ss[0].double().numpy()
    coupled = np_ln(np_attention(p, s, fusion.cross1) + p, fusion.norm1)
    z = np_ln(np_attention(s, coupled, fusion.cross2) + s, fusion.norm2)
    expected = np_ln(np_ffn(z, fusion.ffn) + z, fusion.norm3)
    assert np.abs(out - expected).max() < 1e-5


def test_fusion_is_order_sensitive():
    torch.manual_seed(0)
    fusion = SemanticFusion(DIM, HEADS)
    a, b = rand(1, NUM_SEM, DIM, seed=1), rand(1, NUM_SEM, DIM, seed=2)
    assert not torch.allclose(fusion(a, b), fusion(b, a))


# --- decoding -----------------------------------------------------------------

def test_decode_zero_weight_and_passthrough():
    block = PNPTBlock(cfg(), 0)
    zero_weights(block)
    e_p, e_s = rand(2, SEQ, DIM, seed=1), rand(2, SEQ, DIM, seed=2)
    sem = rand(1, NUM_SEM, DIM, seed=3)
    r_s, _ = block.aggregate(e_s, sem, 1)
    out = block.decode(r_s, sem.expand(2, -1, -1), 1)
    assert torch.allclose(out, ln(ln(r_s)), atol=1e-6)
    _, _, sem_next = block(e_p, e_s, sem)
    r_p, s_p = block.aggregate(e_p, sem, 0)
    _, s_s = block.aggregate(e_s, sem, 1)
    assert torch.equal(sem_next, block.fusion(s_p, s_s))


def test_decode_rows_over_semantic_tokens():
    torch.manual_seed(21)
    block = PNPTBlock(cfg(), 0)
    layer = block.decoders[0]
    layer.attn.keep_weights = True
    block.decode(rand(2, SEQ, DIM, seed=1), rand(2, NUM_SEM, DIM, seed=2), 0)
    w = layer.attn.last_weights
    assert w.shape == (2, HEADS, SEQ, NUM_SEM)
    assert (w.sum(-1) - 1).abs().max() < 1e-6


def test_decode_matches_straight_line_oracle():
    torch.manual_seed(21)
    block = PNPTBlock(cfg(), 0)
    r, sem = rand(1, SEQ, DIM, seed=21), rand(1, NUM_SEM, DIM, seed=22)
    out = block.decode(r, sem, 0)[0].detach().numpy()
    expected = np_layer(r[0].double().numpy(), sem[0].double().numpy(), block.decoders[0])
    assert np.abs(out - expected).max() < 1e-5


# --- trunk --------------------------------------------------------------------

def test_zero_blocks_is_identity():
    trunk = PNPTTrunk(cfg(num_blocks=0))
    e_p, e_s = rand(2, SEQ, DIM, seed=1), rand(2, SEQ, DIM, seed=2)
    out_p, out_s = trunk(e_p, e_s)
    assert torch.equal(out_p, e_p) and torch.equal(out_s, e_s)


def test_one_block_equals_manual_composition():
    torch.manual_seed(5)
    trunk = PNPTTrunk(cfg(num_blocks=1))
    block = trunk.blocks[0]
    e_p, e_s = rand(2, SEQ, DIM, seed=1), rand(2, SEQ, DIM, seed=2)
    out_p, out_s = trunk(e_p, e_s)
    sem = trunk.semantic[None]
    r_p, s_p = block.aggregate(e_p, sem, 0)
    r_s, s_s = block.aggregate(e_s, sem, 1)
    fused = block.fusion(s_p, s_s)
    assert torch.allclose(out_p, block.decode(r_p, fused, 0), atol=1e-6)
    assert torch.allclose(out_s, block.decode(r_s, fused, 1), atol=1e-6)


def test_trunk_deterministic():
    torch.manual_seed(6)
    trunk = PNPTTrunk(cfg(num_blocks=2)).eval()
    e_p, e_s = rand(2, SEQ, DIM, seed=1), rand(2, SEQ, DIM, seed=2)
    a = trunk(e_p, e_s)
    b = trunk(e_p, e_s)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_branch_swap_is_not_symmetric():
    torch.manual_seed(8)
    trunk = PNPTTrunk(cfg(num_blocks=2, share_branch_weights=True))
    e_p, e_s = rand(1, SEQ, DIM, seed=1), rand(1, SEQ, DIM, seed=2)
    p1, s1 = trunk(e_p, e_s)
    p2, s2 = trunk(e_s, e_p)
    assert not torch.allclose(p1, s2, atol=1e-4)
    assert not torch.allclose(s1, p2, atol=1e-4)


def test_separate_branch_weights():
    shared = PNPTBlock(cfg(share_branch_weights=True), 0)
    separate = PNPTBlock(cfg(share_branch_weights=False), 0)
    assert len(shared.encoders) == 1 and len(separate.encoders) == 2
    assert sum(p.numel() for p in separate.parameters()) > sum(p.numel() for p in shared.parameters())


@pytest.mark.parametrize("flags", [
    dict(dual_stream=False),
    dict(semantic_tokens=False),
    dict(conditional_decoding=False),
    dict(dual_stream=False, semantic_tokens=False, conditional_decoding=False),
])
def test_ablation_trunks_run(flags):
    trunk = PNPTTrunk(cfg(num_blocks=2, **flags))
    e_p = None if flags.get("dual_stream") is False else rand(2, SEQ, DIM, seed=1)
    out_p, out_s = trunk(e_p, rand(2, SEQ, DIM, seed=2))
    assert out_s.shape == (2, SEQ, DIM) and torch.isfinite(out_s).all()
    assert (out_p is None) == (e_p is None)


def test_nan_reports_block_index():
    trunk = PNPTTrunk(cfg(num_blocks=2))
    e = rand(1, SEQ, DIM)
    e[0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="block 0"):
        trunk(rand(1, SEQ, DIM), e)


def test_semantic_token_init():
    a = init_semantic_tokens(40, 96, seed=3)
    assert a.shape == (40, 96)
    assert torch.equal(a, init_semantic_tokens(40, 96, seed=3))
    assert not torch.equal(a, init_semantic_tokens(40, 96, seed=4))
    big = init_semantic_tokens(100, 100, seed=0)
    assert 0.018 <= big.std().item() <= 0.022
    with pytest.raises(ValueError):
        init_semantic_tokens(0, 4)


def test_config_heads_must_divide():
    with pytest.raises(ValueError):
        AttentionConfig(hidden_dim=10, heads=4)


def test_block_gradients_finite_difference():
    torch.manual_seed(2)
    trunk = PNPTTrunk(cfg(num_blocks=1)).double()
    e_p, e_s = rand(1, SEQ, DIM, seed=1, dtype=torch.float64), rand(1, SEQ, DIM, seed=2, dtype=torch.float64)
    target = rand(1, SEQ, DIM, seed=3, dtype=torch.float64)

    def loss():
        p, s = trunk(e_p, e_s)
        return ((p - target) ** 2).sum() + ((s + target) ** 2).sum()

    params = [p for p in trunk.parameters()]
    assert fd_check(loss, params, probes=5, eps=1e-5) < 1e-4
