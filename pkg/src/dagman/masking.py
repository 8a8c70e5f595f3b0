"""Token mask generators, resolution conversion and mask application.

Convention: ``keep`` is 1 for visible tokens and 0 for masked ones; the
loss-side indicator ``masked`` is its complement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import MaskPolicy
from .errors import ValidationError
from .semantic_attention import SemanticAttention
from .volume_data import save_volume, seeded_rng

STRATEGY_TAGS = ("attention", "random", "blockwise", "low-attention", "dropout", "upsampled", "none")


def count(ratio: float, n: int) -> int:
    """floor(ratio * n), tolerant of binary rounding such as 0.29 * 100."""
    return int(math.floor(ratio * n + 1e-9))


@dataclass
class MaskVector:
    keep: np.ndarray
    grid_shape: tuple[int, int, int]
    strategy: str = "none"

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=np.uint8).reshape(-1)
        self.grid_shape = tuple(int(g) for g in self.grid_shape)
        if self.keep.size != math.prod(self.grid_shape):
            raise ValidationError(f"grid_shape: {self.grid_shape} does not match mask length {self.keep.size}")
        if self.keep.max(initial=0) > 1:
            raise ValidationError("keep: entries must be 0 or 1")

    @property
    def masked(self) -> np.ndarray:
        return 1 - self.keep

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())

    def __len__(self) -> int:
        return self.keep.size

    def keep_tensor(self, like: torch.Tensor | None = None) -> torch.Tensor:
        t = torch.from_numpy(self.keep.astype(np.float32))
        if like is not None:
            t = t.to(dtype=like.dtype, device=like.device)
        return t


def _values(satt) -> tuple[np.ndarray, tuple]:
    if isinstance(satt, SemanticAttention):
        return satt.values, satt.grid_shape
    v = np.asarray(satt, dtype=np.float64).reshape(-1)
    return v, (v.size, 1, 1)


def attention_guided_mask(satt, policy: MaskPolicy) -> MaskVector:
    """Mask the tokens ranked (floor(sN), floor(rN)] by descending attention; higher ranks stay as hints."""
    values, grid = _values(satt)
    n = values.size
    if n < 1:
        raise ValidationError("satt: needs at least one token")
    R, S = count(policy.r, n), count(policy.s, n)
    if S > 0 and S >= R:
        raise ValidationError(f"mask.s: hint count {S} must be below mask count {R} for N={n}", field="mask.s")
    order = np.argsort(-values, kind="stable")
    keep = np.ones(n, dtype=np.uint8)
    keep[order[S:R]] = 0
    return MaskVector(keep, grid, "attention")


def low_attention_mask(satt, policy: MaskPolicy) -> MaskVector:
    """Mask the floor(rN) lowest-attention tokens; no hints."""
    values, grid = _values(satt)
    order = np.argsort(values, kind="stable")
    keep = np.ones(values.size, dtype=np.uint8)
    keep[order[:count(policy.r, values.size)]] = 0
    return MaskVector(keep, grid, "low-attention")


def random_mask(n: int, ratio: float, seed: int, grid_shape=None) -> MaskVector:
    if not 0 <= ratio <= 1:
        raise ValidationError(f"ratio: must be in [0, 1], got {ratio}")
    rng = seeded_rng(seed)
    keep = np.ones(n, dtype=np.uint8)
    keep[rng.permutation(n)[:count(ratio, n)]] = 0
    return MaskVector(keep, grid_shape or (n, 1, 1), "random")


def blockwise_mask(grid_shape, ratio: float, block_shape, seed: int) -> MaskVector:
    """Mask whole blocks in random order until floor(ratio * N) tokens are covered.

    The final block is truncated to its lowest flat indices so the count is exact.
    """
    grid = tuple(int(g) for g in grid_shape)
    block = tuple(int(b) for b in block_shape)
    if any(g % b for g, b in zip(grid, block)):
        raise ValidationError(f"block_shape: {block} does not divide grid {grid}", field="mask.block_shape")
    if not 0 <= ratio <= 1:
        raise ValidationError(f"ratio: must be in [0, 1], got {ratio}")
    n = math.prod(grid)
    target = count(ratio, n)
    idx = np.arange(n).reshape(grid)
    nb = tuple(g // b for g, b in zip(grid, block))
    blocks = (
        idx.reshape(nb[0], block[0], nb[1], block[1], nb[2], block[2])
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(-1, math.prod(block))
    )
    rng = seeded_rng(seed)
    keep = np.ones(n, dtype=np.uint8)
    remaining = target
    for b in rng.permutation(len(blocks)):
        if remaining <= 0:
            break
        members = np.sort(blocks[b])[:remaining]
        keep[members] = 0
        remaining -= members.size
    return MaskVector(keep, grid, "blockwise")


def upsample_mask(m: MaskVector, factor) -> MaskVector:
    """Nearest-neighbour replication of a coarse mask onto a finer grid."""
    factor = tuple(int(f) for f in factor)
    if min(factor) < 1:
        raise ValidationError(f"factor: must be >= 1 componentwise, got {factor}")
    keep = m.keep.reshape(m.grid_shape)
    for axis, f in enumerate(factor):
        keep = np.repeat(keep, f, axis=axis)
    grid = tuple(g * f for g, f in zip(m.grid_shape, factor))
    return MaskVector(keep, grid, m.strategy)


def masked_coverage(m: MaskVector, factor) -> np.ndarray:
    """Fraction of masked fine tokens under each coarse cell (flat, C-order)."""
    factor = tuple(int(f) for f in factor)
    if any(g % f for g, f in zip(m.grid_shape, factor)):
        raise ValidationError(f"factor: {factor} does not divide grid {m.grid_shape}")
    g = m.grid_shape
    a = m.masked.reshape(g[0] // factor[0], factor[0], g[1] // factor[1], factor[1], g[2] // factor[2], factor[2])
    return a.mean(axis=(1, 3, 5)).reshape(-1)


def downsample_mask(m: MaskVector, factor) -> MaskVector:
    """A coarse cell is masked iff any fine token under it is masked."""
    cov = masked_coverage(m, factor)
    grid = tuple(g // int(f) for g, f in zip(m.grid_shape, factor))
    return MaskVector((cov == 0).astype(np.uint8), grid, m.strategy)


def apply_mask(tokens, m: MaskVector | np.ndarray | torch.Tensor):
    """Zero masked token rows: row i becomes keep_i * row i."""
    from .encoder import TokenGrid

    grid = None
    if isinstance(tokens, TokenGrid):
        grid, stage, tokens = tokens.grid_shape, tokens.stage, tokens.tokens
    keep = m.keep_tensor(tokens) if isinstance(m, MaskVector) else torch.as_tensor(m).to(tokens)
    if keep.shape[-1] != tokens.shape[-2]:
        raise ValidationError(f"mask: length {keep.shape[-1]} does not match {tokens.shape[-2]} tokens")
    out = tokens * keep.unsqueeze(-1)
    if grid is not None:
        return TokenGrid(out, grid, stage)
    return out


def dropout_mask(n: int, r_t: float, seed: int, grid_shape=None) -> MaskVector:
    if not 0 <= r_t <= 1:
        raise ValidationError(f"mask.r_t: must be in [0, 1], got {r_t}", field="mask.r_t")
    m = random_mask(n, r_t, seed, grid_shape)
    m.strategy = "dropout"
    return m


def patch_dropout(tokens, r_t: float, seed: int):
    """Zero floor(r_t * N) seeded token positions; returns (tokens, noise mask)."""
    from .encoder import TokenGrid

    if isinstance(tokens, TokenGrid):
        m = dropout_mask(tokens.num_tokens, r_t, seed, tokens.grid_shape)
    else:
        m = dropout_mask(tokens.shape[-2], r_t, seed)
    return apply_mask(tokens, m), m


def save_mask(m: MaskVector, path) -> None:
    save_volume(m.keep.reshape(m.grid_shape), path, dtype="u8")
