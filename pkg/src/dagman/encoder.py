"""3D hierarchical windowed-attention encoder (Swin-style) with a semantic-attention tap."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import ValidationError

Triple = tuple[int, int, int]


@dataclass
class TokenGrid:
    """Tokens of shape (B, N, D) laid out C-order over ``grid_shape``."""

    tokens: torch.Tensor
    grid_shape: Triple
    stage: int = 0

    def __post_init__(self):
        if self.tokens.dim() == 2:
            self.tokens = self.tokens.unsqueeze(0)
        if self.tokens.shape[1] != math.prod(self.grid_shape):
            raise ValidationError(
                f"grid_shape: {self.grid_shape} does not match {self.tokens.shape[1]} tokens"
            )

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]


@dataclass
class StageOutputs:
    stages: list[TokenGrid]
    pooled: torch.Tensor
    tap_features: torch.Tensor
    sa_tokens: Optional[TokenGrid] = None
    cls: Optional[torch.Tensor] = None
    cls_attention: Optional[torch.Tensor] = None
    extras: dict = field(default_factory=dict)


class DropPath(nn.Module):
    """Stochastic depth on residual branches, per sample."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.dim() - 1)
        return x * x.new_empty(shape).bernoulli_(keep) / keep


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention; ``forward`` also returns the attention weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"heads: {heads} does not divide width {dim}")
        self.dim, self.heads = dim, heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.record = False
        self.last_attn: Optional[torch.Tensor] = None

    def attention_weights(self, x: torch.Tensor, bias=None, mask=None):
        """Returns (attn, v): attn is (B, heads, T, T)."""
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.view(B // nw, nw, self.heads, T, T) + mask.unsqueeze(1).unsqueeze(0)
            logits = logits.view(B, self.heads, T, T)
        return logits.softmax(dim=-1), v

    def forward(self, x, bias=None, mask=None):
        B, T, C = x.shape
        attn, v = self.attention_weights(x, bias, mask)
        if self.record:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(out), attn


def relative_position_index(window: Triple) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(*[torch.arange(w) for w in window], indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + torch.tensor([w - 1 for w in window])
    span = [2 * w - 1 for w in window]
    return rel[..., 0] * span[1] * span[2] + rel[..., 1] * span[2] + rel[..., 2]


class WindowAttention(MultiHeadAttention):
    """Multi-head attention within a window, with a learned relative-position bias (zero init)."""

    def __init__(self, dim: int, window: Triple, heads: int):
        super().__init__(dim, heads)
        self.window = tuple(window)
        span = math.prod(2 * w - 1 for w in self.window)
        self.rel_bias = nn.Parameter(torch.zeros(span, heads))
        self.register_buffer("rel_index", relative_position_index(self.window), persistent=False)

    def position_bias(self) -> torch.Tensor:
        T = math.prod(self.window)
        return self.rel_bias[self.rel_index.reshape(-1)].reshape(T, T, -1).permute(2, 0, 1)

    def forward(self, x, bias=None, mask=None):
        return super().forward(x, self.position_bias(), mask)


def window_partition(x: torch.Tensor, window: Triple) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * nW, wd * wh * ww, C)."""
    B, D, H, W, C = x.shape
    wd, wh, ww = window
    x = x.view(B, D // wd, wd, H // wh, wh, W // ww, ww, C)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wd * wh * ww, C)


def window_reverse(windows: torch.Tensor, window: Triple, grid: Triple) -> torch.Tensor:
    D, H, W = grid
    wd, wh, ww = window
    C = windows.shape[-1]
    x = windows.view(-1, D // wd, H // wh, W // ww, wd, wh, ww, C)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(-1, D, H, W, C)


def shift_attention_mask(grid: Triple, window: Triple, shift: Triple) -> Optional[torch.Tensor]:
    """Additive (nW, T, T) mask blocking pairs that only share a window through wrap-around."""
    if not any(shift):
        return None
    labels = torch.zeros(1, *grid, 1)
    regions = [
        (slice(0, -w), slice(-w, -s), slice(-s, None)) if s else (slice(None),)
        for w, s in zip(window, shift)
    ]
    for i, (a, b, c) in enumerate(itertools.product(*regions)):
        labels[:, a, b, c, :] = i
    lw = window_partition(labels, window).squeeze(-1)
    diff = lw.unsqueeze(1) - lw.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


def window_attention(
    tokens: torch.Tensor,
    grid: Triple,
    attn: WindowAttention,
    shift: Triple = (0, 0, 0),
) -> torch.Tensor:
    """Attention within (cyclically shifted) windows over a (B, N, C) token grid."""
    window = attn.window
    if any(g % w for g, w in zip(grid, window)):
        raise ValidationError(f"window: {window} does not divide grid {grid}")
    if any(s >= w or s < 0 for s, w in zip(shift, window)):
        raise ValidationError(f"shift: {shift} must be componentwise in [0, window {window})")
    B, N, C = tokens.shape
    x = tokens.view(B, *grid, C)
    if any(shift):
        x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
    mask = shift_attention_mask(grid, window, shift)
    if mask is not None:
        mask = mask.to(dtype=tokens.dtype, device=tokens.device)
    out, _ = attn(window_partition(x, window), mask=mask)
    x = window_reverse(out, window, grid)
    if any(shift):
        x = torch.roll(x, shifts=tuple(shift), dims=(1, 2, 3))
    return x.reshape(B, N, C)


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, grid, window, shift, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.grid, self.shift = tuple(grid), tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(window_attention(self.norm1(x), self.grid, self.attn, self.shift))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping voxel patches plus a learned position encoding."""

    def __init__(self, input_shape: Triple, patch: Triple, dim: int):
        super().__init__()
        self.patch = tuple(patch)
        self.grid = tuple(n // p for n, p in zip(input_shape, patch))
        self.proj = nn.Conv3d(1, dim, kernel_size=self.patch, stride=self.patch)
        self.pos_embed = nn.Parameter(torch.zeros(1, math.prod(self.grid), dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, D, H, W) or (B, D, H, W) -> (B, N, dim) without position encoding."""
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if any(n % p for n, p in zip(x.shape[2:], self.patch)):
            raise ValidationError(f"patch_size: {self.patch} does not divide crop {tuple(x.shape[2:])}")
        if tuple(n // p for n, p in zip(x.shape[2:], self.patch)) != self.grid:
            raise ValidationError(f"input_shape: crop {tuple(x.shape[2:])} does not match the encoder")
        return self.proj(x).flatten(2).transpose(1, 2)

    def forward(self, x):
        return self.project(x) + self.pos_embed


def _as_tensor(view) -> torch.Tensor:
    if torch.is_tensor(view):
        return view
    if not isinstance(view, np.ndarray):
        view = view.data  # Volume
    return torch.as_tensor(np.asarray(view))


def patch_embed(view, embed: PatchEmbed) -> TokenGrid:
    view = _as_tensor(view)
    if view.dim() == 3:
        view = view[None, None]
    return TokenGrid(embed(view.to(embed.pos_embed.dtype)), embed.grid, stage=1)


MERGE_OFFSETS = list(itertools.product((0, 1), repeat=3))


class PatchMerge(nn.Module):
    """Concatenate each 2x2x2 neighborhood (offsets in lexicographic order) and project to 2x width."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor, grid: Triple):
        if any(g % 2 for g in grid):
            raise ValidationError(f"grid: every dimension must be even to merge, got {grid}")
        B, N, C = x.shape
        x = x.view(B, *grid, C)
        parts = [x[:, a::2, b::2, c::2, :] for a, b, c in MERGE_OFFSETS]
        merged = torch.cat(parts, dim=-1)
        new_grid = tuple(g // 2 for g in grid)
        return self.reduction(merged.reshape(B, -1, 8 * C)), new_grid


def patch_merge(x: TokenGrid, merge: PatchMerge) -> TokenGrid:
    tokens, grid = merge(x.tokens, x.grid_shape)
    return TokenGrid(tokens, grid, x.stage + 1)


class Stage(nn.Module):
    def __init__(self, cfg: EncoderConfig, k: int, drop_path: list[float]):
        super().__init__()
        dim, grid = cfg.stage_width(k), cfg.stage_grid(k)
        self.grid = grid
        hier = cfg.backbone == "hierarchical"
        self.merge = PatchMerge(cfg.stage_width(k - 1)) if hier and k > 1 else None
        window, shift = cfg.stage_window(k), cfg.stage_shift(k)
        self.blocks = nn.ModuleList(
            SwinBlock(
                dim,
                cfg.stage_heads[k - 1],
                grid,
                window,
                shift if (i % 2 and hier) else (0, 0, 0),
                cfg.mlp_ratio,
                drop_path[i],
            )
            for i in range(cfg.stage_depths[k - 1])
        )

    def forward(self, x, grid):
        if self.merge is not None:
            x, grid = self.merge(x, grid)
        for blk in self.blocks:
            x = blk(x)
        return x


def init_weights(m: nn.Module) -> None:
    """Truncated-normal(0.02) weights and zero biases for linear/conv layers."""
    if isinstance(m, (nn.Linear, nn.Conv3d)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class SwinEncoder3D(nn.Module):
    """Four-stage encoder. The SA module (if any) runs right after stage ``cfg.sa_stage``."""

    def __init__(self, cfg: EncoderConfig, drop_path: float = 0.0):
        super().__init__()
        from .semantic_attention import SemanticAttentionModule

        self.cfg = cfg
        self.embed = PatchEmbed(cfg.input_shape, cfg.patch_size, cfg.embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim)) if cfg.mask_token else None
        total = sum(cfg.stage_depths)
        rates = torch.linspace(0, drop_path, total).tolist() if total > 1 else [drop_path]
        self.stages = nn.ModuleList()
        start = 0
        for k in range(1, 5):
            depth = cfg.stage_depths[k - 1]
            self.stages.append(Stage(cfg, k, rates[start:start + depth]))
            start += depth
        self.tap_stage = cfg.sa_stage or 3
        tap_width = cfg.stage_width(self.tap_stage)
        self.sa = (
            SemanticAttentionModule(tap_width, cfg.sa_num_heads, cfg.sa_depth, cfg.mlp_ratio, drop_path)
            if cfg.sa_stage is not None
            else None
        )
        self.tap_norm = nn.LayerNorm(tap_width)
        self.norm = nn.LayerNorm(cfg.out_width)
        self.apply(init_weights)

    @property
    def input_grid(self) -> Triple:
        return self.embed.grid

    def embed_tokens(self, x: torch.Tensor, keep: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Patch tokens with masked positions zeroed (or replaced) before position encoding."""
        tokens = self.embed.project(x)
        if keep is not None:
            keep = keep.to(tokens.dtype).unsqueeze(-1)
            if self.mask_token is not None:
                tokens = tokens * keep + self.mask_token * (1 - keep)
            else:
                tokens = tokens * keep
        return tokens + self.embed.pos_embed

    def forward(self, x: torch.Tensor, keep: Optional[torch.Tensor] = None) -> StageOutputs:
        tokens = self.embed_tokens(x, keep)
        grid = self.embed.grid
        stages = []
        out = StageOutputs(stages=stages, pooled=None, tap_features=None)
        for k, stage in enumerate(self.stages, start=1):
            tokens = stage(tokens, grid)
            grid = stage.grid
            stages.append(TokenGrid(tokens, grid, k))
            if k == self.tap_stage:
                if self.sa is not None:
                    tokens, cls, cls_attn = self.sa(tokens)
                    out.sa_tokens = TokenGrid(tokens, grid, k)
                    out.cls = self.tap_norm(cls)
                    out.cls_attention = cls_attn
                out.tap_features = self.tap_norm(tokens)
        final = self.norm(tokens)
        stages[-1] = TokenGrid(final, grid, 4)
        out.pooled = final.mean(dim=1)
        return out


def forward_stages(view, model: SwinEncoder3D, keep=None) -> StageOutputs:
    view = _as_tensor(view)
    if view.dim() == 3:
        view = view[None, None]
    return model(view.to(model.embed.pos_embed.dtype), keep)


def attention_modules(model: nn.Module) -> list[tuple[int, int, WindowAttention]]:
    """(stage, layer, module) for every windowed-attention layer of the encoder stages."""
    found = []
    for k, stage in enumerate(model.stages, start=1):
        for i, blk in enumerate(stage.blocks):
            found.append((k, i, blk.attn))
    return found
