import numpy as np
import pytest
import torch

from dagman.encoder import MultiHeadAttention, TokenGrid
from dagman.errors import ValidationError
from dagman.semantic_attention import (
    SemanticAttention,
    SemanticAttentionModule,
    attach_cls,
    compute_satt,
    sa_forward,
)


def eq1_oracle(z, W, b, heads):
    """S_ATT for the last row of z: per-head softmax(q_cls . K / sqrt(d)), mean over heads, drop the CLS key."""
    n1, D = z.shape
    d = D // heads
    q = W[:D] @ z[-1] + b[:D]
    K = z @ W[D:2 * D].T + b[D:2 * D]
    rows = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        logits = K[:, sl] @ q[sl] / np.sqrt(d)
        e = np.exp(logits - logits.max())
        rows.append(e / e.sum())
    return np.mean(rows, axis=0)[:-1]


def test_attach_cls_length_and_copy():
    m = SemanticAttentionModule(4, 1, depth=1)
    with torch.no_grad():
        m.cls_token.zero_()
    x = torch.randn(1, 4096, 4)
    before = x.clone()
    seq = attach_cls(TokenGrid(x, (16, 16, 16)), m)
    assert seq.shape == (1, 4097, 4)
    assert torch.equal(seq[0, -1], torch.zeros(4))
    assert torch.equal(seq[:, :-1], before) and torch.equal(x, before)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_sa_forward_rows_are_distributions(heads):
    torch.manual_seed(heads)
    m = SemanticAttentionModule(8, heads)
    seq = attach_cls(torch.randn(3, 27, 8), m)
    patches, cls, rows = sa_forward(seq, m, (3, 3, 3))
    assert patches.grid_shape == (3, 3, 3) and patches.tokens.shape == (3, 27, 8)
    assert cls.shape == (3, 8)
    assert rows.shape == (3, heads, 28)
    torch.testing.assert_close(rows.sum(-1), torch.ones(3, heads), atol=1e-5, rtol=0)


def test_zero_patch_field_still_normalized():
    m = SemanticAttentionModule(8, 2)
    _, _, rows = m(torch.zeros(1, 64, 8))
    assert torch.isfinite(rows).all()
    torch.testing.assert_close(rows.sum(-1), torch.ones(1, 2), atol=1e-5, rtol=0)


def test_permutation_equivariance():
    torch.manual_seed(0)
    m = SemanticAttentionModule(8, 2).double()
    x = torch.randn(1, 64, 8, dtype=torch.float64)
    perm = torch.randperm(64)
    _, _, rows = m(x)
    _, _, rows_p = m(x[:, perm])
    torch.testing.assert_close(rows_p[..., :-1], rows[..., :-1][..., perm], atol=1e-10, rtol=0)
    torch.testing.assert_close(rows_p[..., -1], rows[..., -1], atol=1e-10, rtol=0)


def test_uniform_attention():
    N = 15
    satt = compute_satt(torch.full((1, N + 1), 1.0 / (N + 1), dtype=torch.float64), heads=1)
    assert satt.shape == (N,)
    np.testing.assert_allclose(satt.numpy(), 1.0 / (N + 1))
    assert abs(float(satt.sum()) - N / (N + 1)) < 1e-12


def test_two_head_mean_and_order_invariance():
    rng = np.random.default_rng(0)
    r = rng.dirichlet(np.ones(9), size=2)
    satt = compute_satt(r, heads=2).numpy()
    np.testing.assert_allclose(satt, (r[0] + r[1])[:-1] / 2, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(compute_satt(r[::-1].copy()).numpy(), satt)


def test_grid_wrapping():
    r = np.random.default_rng(1).dirichlet(np.ones(9), size=1)
    s = compute_satt(r, grid_shape=(2, 2, 2))
    assert isinstance(s, SemanticAttention) and s.grid_shape == (2, 2, 2) and len(s) == 8
    assert np.all((s.values >= 0) & (s.values <= 1)) and 0 < s.values.sum() <= 1


def test_rejects_unnormalized_rows():
    with pytest.raises(ValidationError, match="sum to 1"):
        compute_satt(np.full((2, 5), 0.3))
    with pytest.raises(ValidationError, match="heads"):
        compute_satt(np.full((2, 5), 0.2), heads=4)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_eq1_matches_dense_oracle(heads):
    rng = np.random.default_rng(heads)
    for _ in range(10):
        attn = MultiHeadAttention(8, heads).double()
        z = torch.from_numpy(rng.normal(size=(1, 16, 8)))
        with torch.no_grad():
            weights, _ = attn.attention_weights(z)
        got = compute_satt(weights[:, :, -1, :]).numpy()[0]
        want = eq1_oracle(z[0].numpy(), attn.qkv.weight.detach().numpy(), attn.qkv.bias.detach().numpy(), heads)
        np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


def test_eq1_gradient_matches_finite_differences():
    torch.manual_seed(3)
    attn = MultiHeadAttention(8, 2).double()
    z = torch.randn(1, 16, 8, dtype=torch.float64)
    w = torch.randn(15, dtype=torch.float64)

    def f():
        weights, _ = attn.attention_weights(z)
        return (compute_satt(weights[:, :, -1, :])[0] * w).sum()

    f().backward()
    g = attn.qkv.weight.grad.clone()
    h = 1e-4
    rng = np.random.default_rng(0)
    for _ in range(40):
        i, j = int(rng.integers(16)), int(rng.integers(8))  # q and k rows only carry gradient
        with torch.no_grad():
            orig = float(attn.qkv.weight[i, j])
            attn.qkv.weight[i, j] = orig + h
            up = float(f())
            attn.qkv.weight[i, j] = orig - h
            down = float(f())
            attn.qkv.weight[i, j] = orig
        num = (up - down) / (2 * h)
        assert abs(num - float(g[i, j])) <= 1e-3 * max(abs(num), 1e-6) + 1e-9
