"""Semantic attention: global-attention blocks with a [CLS] token and the head-averaged S_ATT vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoder import DropPath, Mlp, MultiHeadAttention, TokenGrid
from .errors import ValidationError


@dataclass
class SemanticAttention:
    values: np.ndarray
    grid_shape: tuple[int, int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != int(np.prod(self.grid_shape)):
            raise ValidationError(f"grid_shape: {self.grid_shape} does not match {self.values.size} values")

    def __len__(self) -> int:
        return self.values.size


class SABlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + self.drop_path(y)
        return x + self.drop_path(self.mlp(self.norm2(x))), attn


class SemanticAttentionModule(nn.Module):
    """Transformer blocks over all patch tokens plus a learned [CLS] token appended last."""

    def __init__(self, dim: int, heads: int, depth: int = 2, mlp_ratio: float = 4.0, drop_path: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"sa_heads: {heads} does not divide width {dim}")
        self.heads = heads
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(SABlock(dim, heads, mlp_ratio, drop_path) for _ in range(depth))

    def attach_cls(self, tokens: torch.Tensor) -> torch.Tensor:
        cls = self.cls_token.expand(tokens.shape[0], -1, -1).to(tokens.dtype)
        return torch.cat([tokens, cls], dim=1)

    def forward(self, tokens: torch.Tensor):
        """Returns (patch tokens, [CLS] embedding, final-block [CLS] attention of shape (B, h, N+1))."""
        x = self.attach_cls(tokens)
        attn = None
        for blk in self.blocks:
            x, attn = blk(x)
        return x[:, :-1], x[:, -1], attn[:, :, -1, :]


def attach_cls(x: TokenGrid | torch.Tensor, module: SemanticAttentionModule) -> torch.Tensor:
    tokens = x.tokens if isinstance(x, TokenGrid) else x
    if tokens.dim() == 2:
        tokens = tokens.unsqueeze(0)
    return module.attach_cls(tokens)


def sa_forward(seq: torch.Tensor, module: SemanticAttentionModule, grid_shape):
    """Run the SA blocks on an already-augmented (B, N+1, D) sequence."""
    attn = None
    x = seq
    for blk in module.blocks:
        x, attn = blk(x)
    return TokenGrid(x[:, :-1], tuple(grid_shape)), x[:, -1], attn[:, :, -1, :]


def compute_satt(per_head_cls_attention, heads: int | None = None, grid_shape=None, atol: float = 1e-4):
    """Mean over heads of the [CLS] attention rows, restricted to the N patch keys.

    Accepts (h, N+1) or (B, h, N+1), tensor or array. The [CLS]->[CLS] entry is
    dropped without renormalising. Returns a tensor of shape (N,) or (B, N);
    wrap it in :class:`SemanticAttention` when ``grid_shape`` is given.
    """
    a = per_head_cls_attention
    if not torch.is_tensor(a):
        a = torch.as_tensor(np.asarray(a))
    squeeze = a.dim() == 2
    if squeeze:
        a = a.unsqueeze(0)
    if heads is not None and a.shape[1] != heads:
        raise ValidationError(f"heads: expected {heads} attention rows, got {a.shape[1]}")
    sums = a.detach().sum(dim=-1)
    if not torch.all((sums - 1).abs() <= atol):
        raise ValidationError(f"per_head_cls_attention: rows must sum to 1 (max error {float((sums - 1).abs().max()):.3g})")
    satt = a.mean(dim=1)[:, :-1]
    if squeeze:
        satt = satt[0]
    if grid_shape is not None:
        return SemanticAttention(satt.detach().cpu().numpy(), tuple(grid_shape))
    return satt
