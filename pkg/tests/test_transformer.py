import torch
import torch.nn.functional as F
import pytest

from hvqtrans.errors import ConfigurationError
from hvqtrans.transformer import Decoder, DecoderLayer, Encoder, EncoderLayer, MultiHeadAttention

from oracles import central_difference, rel_err


def test_encoder_shapes_full_scale():
    enc = Encoder(196, 256, 4).eval()
    outs = enc(torch.randn(1, 196, 256))
    assert len(outs) == 4 and all(o.shape == (1, 196, 256) for o in outs)
    assert all(torch.isfinite(o).all() for o in outs)


def test_encoder_deterministic_in_eval():
    enc = Encoder(8, 16, 2).eval()
    x = torch.randn(2, 8, 16)
    assert all(torch.equal(a, b) for a, b in zip(enc(x), enc(x)))


def test_encoder_identity_residual_path():
    """Zero attention/FFN outputs and LayerNorm on already-normalized rows keep h^l = h^0."""
    enc = Encoder(5, 8, 3, dropout=0.0).eval()
    with torch.no_grad():
        enc.pos_embed.zero_()
        for layer in enc.layers:
            layer.attn.out_proj.weight.zero_()
            layer.attn.out_proj.bias.zero_()
            layer.ffn.fc2.weight.zero_()
            layer.ffn.fc2.bias.zero_()
    h0 = F.layer_norm(torch.randn(1, 5, 8, dtype=torch.float32), (8,))
    for h in enc(h0):
        assert torch.allclose(h, h0, atol=1e-5)


def test_encoder_single_token_closed_form():
    torch.manual_seed(0)
    layer = EncoderLayer(4, heads=2, dropout=0.0).double().eval()
    x = torch.randn(1, 1, 4, dtype=torch.float64)
    a = layer.attn
    # one key: softmax weight 1, attention output = out_proj(v_proj(x))
    attn = a.out_proj(a.v_proj(x))
    y = layer.norm1(x + attn)
    expected = layer.norm2(y + layer.ffn.fc2(F.gelu(layer.ffn.fc1(y))))
    assert torch.allclose(layer(x), expected, atol=1e-12)


def test_attention_rows_are_distributions():
    a = MultiHeadAttention(8, 4)
    a.record = True
    a(torch.randn(2, 5, 8), torch.randn(2, 7, 8), torch.randn(2, 7, 8))
    assert torch.allclose(a.last_weights.sum(-1), torch.ones(2, 4, 5), atol=1e-6)


def test_decoder_single_token_closed_form():
    torch.manual_seed(1)
    layer = DecoderLayer(4, heads=2, dropout=0.0).double().eval()
    d, z = torch.randn(1, 1, 4, dtype=torch.float64), torch.randn(1, 1, 4, dtype=torch.float64)
    sa, ca = layer.self_attn, layer.cross_attn
    q = sa.out_proj(sa.v_proj(layer.norm_sa(d))) + d
    dt = ca.out_proj(ca.v_proj(z)) + q
    expected = layer.ffn(layer.norm_ffn(dt)) + dt
    assert torch.allclose(layer(d, z), expected, atol=1e-12)


def test_decoder_zero_value_projection():
    layer = DecoderLayer(6, heads=2, dropout=0.0).double().eval()
    with torch.no_grad():
        for m in (layer.self_attn, layer.cross_attn):
            m.v_proj.weight.zero_()
            m.v_proj.bias.zero_()
            m.out_proj.bias.zero_()
    d = torch.randn(1, 3, 6, dtype=torch.float64)
    assert torch.allclose(layer(d, d.clone()), layer.ffn(layer.norm_ffn(d)) + d, atol=1e-12)


def test_decoder_fold_order_and_single_layer():
    dec = Decoder(3, 4, 1, heads=2, dropout=0.0).double().eval()
    z = torch.randn(2, 3, 4, dtype=torch.float64)
    expected = dec.layers[0](dec.query_embed.expand(2, -1, -1), z, dec.key_pos_embed)
    assert torch.equal(dec([z]), expected)

    dec = Decoder(3, 4, 3, heads=2, dropout=0.0).double().eval()
    zs = [torch.randn(1, 3, 4, dtype=torch.float64) for _ in range(3)]
    d = dec.query_embed.expand(1, -1, -1)
    for l in (3, 2, 1):
        d = dec.layers[l - 1](d, zs[l - 1], dec.key_pos_embed)
    assert torch.equal(dec(zs), d)


def test_decoder_permutation_equivariance():
    torch.manual_seed(2)
    N, C, L = 5, 8, 2
    dec = Decoder(N, C, L, heads=2, dropout=0.0).double().eval()
    zs = [torch.randn(1, N, C, dtype=torch.float64) for _ in range(L)]
    perm = torch.randperm(N)
    base = dec(zs)
    with torch.no_grad():
        dec.query_embed.copy_(dec.query_embed[perm])
        dec.key_pos_embed.copy_(dec.key_pos_embed[perm])
    permuted = dec([z[:, perm] for z in zs])
    assert torch.allclose(permuted, base[:, perm], atol=1e-12)


def test_decoder_keys_are_codebook_rows_without_positions():
    """With the key positional embedding zeroed, MCA keys are exactly the quantized rows."""
    dec = Decoder(4, 4, 1, heads=2, dropout=0.0).eval()
    with torch.no_grad():
        dec.key_pos_embed.zero_()
    entries = torch.randn(3, 4)
    z = entries[torch.tensor([[0, 2, 2, 1]])]
    seen = {}
    dec.layers[0].cross_attn.register_forward_hook(lambda m, args, out: seen.setdefault("key", args[1]))
    dec([z])
    assert all(any(torch.equal(k, e) for e in entries) for k in seen["key"][0])


@pytest.mark.parametrize("which", ["encoder", "decoder"])
def test_layer_gradients_match_finite_differences(which):
    torch.manual_seed(3)
    C, N = 8, 4
    # random linear probe; a sum of squares is nearly constant after LayerNorm
    probe = torch.randn(1, N, C, dtype=torch.float64)
    if which == "encoder":
        layer = EncoderLayer(C, heads=2, dropout=0.0).double().eval()
        f = lambda x: (layer(x) * probe).sum()  # noqa: E731
    else:
        layer = DecoderLayer(C, heads=2, dropout=0.0).double().eval()
        z = torch.randn(1, N, C, dtype=torch.float64)
        f = lambda x: (layer(x, z) * probe).sum()  # noqa: E731
    x = torch.randn(1, N, C, dtype=torch.float64, requires_grad=True)
    f(x).backward()
    assert rel_err(x.grad, central_difference(f, x.detach())) < 1e-4
    # and one weight matrix
    w = layer.ffn.fc1.weight
    analytic = torch.autograd.grad(f(x.detach()), w)[0]

    def fw(wv):
        with torch.no_grad():
            old = w.clone()
            w.copy_(wv)
            v = f(x.detach())
            w.copy_(old)
        return v

    assert rel_err(analytic, central_difference(fw, w.detach().clone())) < 1e-4


def test_shape_errors():
    enc = Encoder(4, 8, 1)
    with pytest.raises(ConfigurationError):
        enc(torch.zeros(1, 5, 8))
    dec = Decoder(4, 8, 2)
    with pytest.raises(ConfigurationError):
        dec([torch.zeros(1, 4, 8)])
    with pytest.raises(ConfigurationError):
        dec.layers[0](torch.zeros(1, 4, 8), torch.zeros(1, 3, 8))
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4)
