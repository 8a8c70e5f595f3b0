"""Projection heads, sharpening/centering, the four distillation losses and the EMA teacher."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DistillConfig, EncoderConfig
from .encoder import SwinEncoder3D, TokenGrid, init_weights
from .errors import ValidationError

EPS = 1e-12


class ProjectionHead(nn.Module):
    """Three-layer MLP (dim -> hidden -> hidden -> bottleneck) then K cosine prototypes.

    Logits are cosines between the L2-normalised bottleneck vector and unit-norm
    prototype rows, so they lie in [-1, 1] and the temperature sets sharpness.
    With ``norm="batch"`` the hidden layers are batch-normalised using the
    statistics of the current batch only (no running buffers), which strips the
    component shared by every sample before sharpening.
    """

    def __init__(self, dim: int, k: int, hidden: int, bottleneck: int = 64, norm: str = "none"):
        super().__init__()
        if norm not in ("none", "batch"):
            raise ValidationError(f"distill.head_norm: must be 'none' or 'batch', got {norm!r}", field="distill.head_norm")

        def bn():
            return nn.BatchNorm1d(hidden, track_running_stats=False) if norm == "batch" else nn.Identity()

        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), bn(), nn.GELU(), nn.Linear(hidden, hidden), bn(), nn.GELU(), nn.Linear(hidden, bottleneck)
        )
        self.last = nn.Linear(bottleneck, k, bias=False)

    def forward(self, x):
        lead = x.shape[:-1]
        x = F.normalize(self.mlp(x.reshape(-1, x.shape[-1])), dim=-1)
        return F.linear(x, F.normalize(self.last.weight, dim=-1)).reshape(*lead, -1)


class DagmanModel(nn.Module):
    """Encoder plus the [CLS], patch and global projection heads and the voxel predictor."""

    def __init__(self, enc: EncoderConfig, dist: DistillConfig, drop_path: float = 0.0):
        super().__init__()
        self.enc_cfg = enc
        self.encoder = SwinEncoder3D(enc, drop_path)
        tap = enc.stage_width(self.encoder.tap_stage)
        mult, bn, norm = dist.head_hidden_mult, dist.head_bottleneck, dist.head_norm
        self.cls_head = ProjectionHead(tap, dist.k_cls, mult * tap, bn, norm) if enc.sa_stage is not None else None
        self.patch_head = ProjectionHead(tap, dist.k_patch, mult * tap, bn, norm)
        self.global_head = ProjectionHead(enc.out_width, dist.k_g, mult * enc.out_width, bn, norm)
        self.predictor = nn.Linear(enc.out_width, math.prod(enc.recon_block))
        for m in (self.cls_head, self.patch_head, self.global_head, self.predictor):
            if m is not None:
                m.apply(init_weights)

    def forward(self, x, keep=None, heads=("cls", "patch", "global", "pred")) -> dict:
        out = self.encoder(x, keep)
        res = self.project(out, heads)
        if "pred" in heads:
            res["pred"] = self.predictor(out.stages[-1].tokens)
        return res

    def project(self, out, heads=("cls", "patch", "global"), rows=slice(None)) -> dict:
        """Projection-head logits for batch ``rows`` of an encoder output (batch statistics stay within ``rows``)."""
        res = {"outputs": out}
        if "cls" in heads and self.cls_head is not None:
            res["cls"] = self.cls_head(out.cls[rows])
        if "patch" in heads:
            res["patch"] = self.patch_head(out.tap_features[rows])
        if "global" in heads:
            res["global"] = self.global_head(out.pooled[rows])
        return res


def sharpen(logits: torch.Tensor, tau: float, center: torch.Tensor | None = None) -> torch.Tensor:
    if not tau > 0:
        raise ValidationError(f"tau: must be > 0, got {tau}")
    if center is not None:
        logits = logits - center
    return F.softmax(logits / tau, dim=-1)


def project_and_sharpen(embedding, head: nn.Module, tau: float, center=None) -> torch.Tensor:
    """Teacher path passes its running ``center``; the student path leaves it None."""
    return sharpen(head(embedding), tau, center)


def cross_entropy(p_t: torch.Tensor, p_s: torch.Tensor) -> torch.Tensor:
    """Per-row -sum p_t log p_s; the teacher side carries no gradient."""
    return -(p_t.detach() * torch.log(p_s.clamp_min(EPS))).sum(dim=-1)


def _check_dist(p, name):
    if p.dim() < 1 or p.shape[-1] < 1:
        raise ValidationError(f"{name}: expected a distribution over the last axis")


def loss_aitd(p_s_cls: torch.Tensor, p_t_cls: torch.Tensor) -> torch.Tensor:
    _check_dist(p_s_cls, "p_s_cls")
    if p_s_cls.shape != p_t_cls.shape:
        raise ValidationError(f"p_t_cls: shape {tuple(p_t_cls.shape)} != student {tuple(p_s_cls.shape)}")
    return cross_entropy(p_t_cls, p_s_cls).mean()


def loss_gitd(p_s_g: torch.Tensor, p_t_g: torch.Tensor) -> torch.Tensor:
    _check_dist(p_s_g, "p_s_g")
    if p_s_g.shape != p_t_g.shape:
        raise ValidationError(f"p_t_g: shape {tuple(p_t_g.shape)} != student {tuple(p_s_g.shape)}")
    return cross_entropy(p_t_g, p_s_g).mean()


def loss_ampd(p_s_patch: torch.Tensor, p_t_patch: torch.Tensor, m_att) -> torch.Tensor:
    """Masked-token cross-entropy averaged over the masked weight of each item, then over the batch.

    ``m_att`` is (N,) or (B, N) with 1 for masked tokens; fractional weights are allowed.
    """
    if p_s_patch.dim() == 2:
        p_s_patch, p_t_patch = p_s_patch.unsqueeze(0), p_t_patch.unsqueeze(0)
    m = torch.as_tensor(m_att).to(p_s_patch)
    if m.dim() == 1:
        m = m.unsqueeze(0).expand(p_s_patch.shape[0], -1)
    if p_s_patch.shape != p_t_patch.shape or m.shape != p_s_patch.shape[:2]:
        raise ValidationError(
            f"m_att: token counts disagree ({tuple(p_s_patch.shape)}, {tuple(p_t_patch.shape)}, {tuple(m.shape)})"
        )
    ce = cross_entropy(p_t_patch, p_s_patch)
    weight = m.sum(dim=1)
    per_item = (ce * m).sum(dim=1) / weight.clamp_min(EPS)
    return torch.where(weight > 0, per_item, torch.zeros_like(per_item)).mean()


def fold_blocks(pred: torch.Tensor, grid, block) -> torch.Tensor:
    """(B, prod(grid), prod(block)) block predictions -> (B, D, H, W) volume."""
    B = pred.shape[0]
    g, b = tuple(grid), tuple(block)
    if pred.shape[1] != math.prod(g) or pred.shape[2] != math.prod(b):
        raise ValidationError(f"prediction: layout {tuple(pred.shape[1:])} does not match grid {g} x block {b}")
    x = pred.reshape(B, g[0], g[1], g[2], b[0], b[1], b[2])
    return x.permute(0, 1, 4, 2, 5, 3, 6).reshape(B, g[0] * b[0], g[1] * b[1], g[2] * b[2])


def voxel_mask(masked_tokens: torch.Tensor, token_grid, patch) -> torch.Tensor:
    """(B, N) token indicator on the input-patch grid -> (B, D, H, W) voxel indicator."""
    B = masked_tokens.shape[0]
    m = masked_tokens.reshape(B, *token_grid)
    for axis, p in enumerate(patch, start=1):
        m = m.repeat_interleave(p, dim=axis)
    return m


def loss_amip(pred: torch.Tensor, target: torch.Tensor, masked_tokens, stage4_grid, block, input_grid, patch) -> torch.Tensor:
    """Mean absolute error over voxels whose input-patch token is masked, per item then batch mean.

    pred: (B, N4, prod(block)) predictor output; target: (B, 1, D, H, W) or (B, D, H, W).
    """
    if target.dim() == 5:
        target = target[:, 0]
    recon = fold_blocks(pred, stage4_grid, block)
    m = torch.as_tensor(masked_tokens).to(recon)
    if m.dim() == 1:
        m = m.unsqueeze(0).expand(recon.shape[0], -1)
    if m.shape[1] != math.prod(input_grid):
        raise ValidationError(f"mask: {m.shape[1]} tokens do not match input grid {tuple(input_grid)}")
    vm = voxel_mask(m, input_grid, patch)
    if vm.shape != recon.shape or target.shape != recon.shape:
        raise ValidationError(
            f"mask: resolution mismatch ({tuple(vm.shape)} mask, {tuple(recon.shape)} prediction, {tuple(target.shape)} target)"
        )
    err = (recon - target.to(recon)).abs() * vm
    n = vm.flatten(1).sum(dim=1)
    per_item = err.flatten(1).sum(dim=1) / n.clamp_min(1.0)
    return torch.where(n > 0, per_item, torch.zeros_like(per_item)).mean()


def total_loss(amip, ampd, aitd, gitd, cfg: DistillConfig):
    return amip + cfg.lambda_ampd * ampd + cfg.lambda_aitd * aitd + cfg.lambda_gitd * gitd


@dataclass
class DistillState:
    student: nn.Module
    teacher: nn.Module
    centers: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def ema_update(state: DistillState, momentum: float) -> DistillState:
    """teacher <- momentum * teacher + (1 - momentum) * student, parameter by parameter."""
    s_params = dict(state.student.named_parameters())
    t_params = dict(state.teacher.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ValidationError("teacher: parameter names differ from the student")
    for name, p_t in t_params.items():
        p_s = s_params[name]
        if p_s.shape != p_t.shape:
            raise ValidationError(f"{name}: shape {tuple(p_t.shape)} != student {tuple(p_s.shape)}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            p_t.copy_(p_s)
        else:
            p_t.mul_(momentum).add_(p_s, alpha=1.0 - momentum)
    return state


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    if not 0 <= momentum < 1:
        raise ValidationError(f"center_momentum: must be in [0, 1), got {momentum}")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return center * momentum + batch_mean * (1.0 - momentum)


def momentum_at(step: int, total: int, base: float, schedule: str = "cosine") -> float:
    """EMA momentum, optionally ramped from ``base`` to 1 over training on a cosine."""
    if schedule == "constant" or total <= 1:
        return base
    return 1.0 - (1.0 - base) * (math.cos(math.pi * step / total) + 1.0) / 2.0
