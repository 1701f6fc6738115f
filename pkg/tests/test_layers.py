import numpy as np
import pytest

from slotmem import autodiff as ad
from slotmem.autodiff import Tensor
from slotmem.layers import (
    EncoderLayer,
    FeedForward,
    GRUCell,
    LayerNorm,
    Linear,
    MultiHeadSelfAttention,
    ParamRegistry,
    trunc_normal,
)

from gradcheck import finite_diff_check, param


def test_trunc_normal_bounds():
    rng = np.random.default_rng(0)
    x = trunc_normal(rng, (200, 50), std=0.02)
    assert (np.abs(x) <= 0.04).all()
    assert abs(x.std() - 0.02) < 0.005
    again = trunc_normal(np.random.default_rng(0), (200, 50), std=0.02)
    assert np.array_equal(x, again)


def test_registry_rejects_duplicates():
    reg = ParamRegistry()
    reg.make("w", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        reg.make("w", np.zeros((2, 2)))
    assert reg.names() == ["w"]


def _weighted_sum(t, rng):
    return ad.sum_all(t * Tensor(rng.normal(size=t.shape)))


def test_linear_layer_grads():
    reg = ParamRegistry()
    rng = np.random.default_rng(1)
    lin = Linear(reg, "lin", 6, 4, rng)
    x = param("x", (3, 6), rng)
    wrng = np.random.default_rng(2)
    w = Tensor(wrng.normal(size=(3, 4)))
    finite_diff_check(reg.all() + [x], lambda: ad.sum_all(ad.tanh(lin(x)) * w))


def test_layernorm_layer_grads():
    reg = ParamRegistry()
    rng = np.random.default_rng(3)
    ln = LayerNorm(reg, "ln", 8)
    x = param("x", (2, 4, 8), rng, scale=2.0)
    w = Tensor(np.random.default_rng(4).normal(size=(2, 4, 8)))
    finite_diff_check(reg.all() + [x], lambda: ad.sum_all(ln(x) * w))


def test_feedforward_grads():
    reg = ParamRegistry()
    rng = np.random.default_rng(5)
    ffn = FeedForward(reg, "ffn", 6, 12, rng)
    x = param("x", (2, 3, 6), rng)
    finite_diff_check(reg.all() + [x], lambda: ad.mean_all(ad.tanh(ffn(x))))


def test_attention_grads_with_mask():
    reg = ParamRegistry()
    rng = np.random.default_rng(6)
    attn = MultiHeadSelfAttention(reg, "attn", 8, 2, rng)
    x = param("x", (2, 4, 8), rng)
    mask = np.zeros((2, 1, 1, 4))
    mask[1, :, :, 3] = -1e9  # one padded position
    finite_diff_check(reg.all() + [x], lambda: ad.mean_all(ad.tanh(attn(x, mask))))


def test_attention_matches_loop_oracle():
    reg = ParamRegistry()
    rng = np.random.default_rng(7)
    d, heads, length = 4, 2, 3
    attn = MultiHeadSelfAttention(reg, "attn", d, heads, rng)
    x = np.random.default_rng(8).normal(size=(1, length, d))
    got = attn(Tensor(x)).data[0]

    def proj(lin_layer, v):
        return v @ lin_layer.weight.data.T + lin_layer.bias.data

    q, k, v = proj(attn.q, x[0]), proj(attn.k, x[0]), proj(attn.v, x[0])
    dh = d // heads
    mixed = np.zeros((length, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(length):
            scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(length)])
            e = np.exp(scores - scores.max())
            p = e / e.sum()
            for j in range(length):
                mixed[i, sl] += p[j] * v[j, sl]
    want = proj(attn.out, mixed)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_encoder_layer_grads():
    reg = ParamRegistry()
    rng = np.random.default_rng(9)
    layer = EncoderLayer(reg, "layer", 8, 2, 16, rng)
    x = param("x", (2, 3, 8), rng)
    finite_diff_check(reg.all() + [x], lambda: ad.mean_all(ad.tanh(layer(x))))


def test_gru_step_grads():
    reg = ParamRegistry()
    rng = np.random.default_rng(10)
    cell = GRUCell(reg, "gru", 6, rng)
    h = param("h", (3, 6), rng)
    x = param("x", (3, 6), rng)
    finite_diff_check(reg.all() + [h, x],
                      lambda: ad.mean_all(ad.tanh(cell.step(h, x))))


def test_gru_update_gate_one_is_identity():
    reg = ParamRegistry()
    rng = np.random.default_rng(11)
    cell = GRUCell(reg, "gru", 5, rng)
    # force the update gate to saturate at exactly 1
    cell.b_input.data[5:10] = 50.0
    cell.b_hidden.data[5:10] = 50.0
    h = Tensor(rng.normal(size=(2, 5)))
    x = Tensor(rng.normal(size=(2, 5)))
    out = cell.step(h, x)
    assert np.array_equal(out.data, h.data)


def test_gru_chain_grads():
    # gradient flows through several recurrent steps
    reg = ParamRegistry()
    rng = np.random.default_rng(12)
    cell = GRUCell(reg, "gru", 4, rng)
    h0 = param("h0", (2, 4), rng)
    xs = [param(f"x{i}", (2, 4), rng) for i in range(3)]

    def loss():
        h = h0
        for x in xs:
            h = cell.step(h, x)
        return ad.mean_all(ad.tanh(h))

    finite_diff_check(reg.all() + [h0] + xs, loss)
