"""Pretraining loop: masking, noisy teacher, co-distillation losses, EMA and schedules."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import masking
from .codistill import (
    DagmanModel,
    DistillState,
    ema_update,
    loss_aitd,
    loss_amip,
    loss_ampd,
    loss_gitd,
    momentum_at,
    sharpen,
    total_loss,
    update_center,
)
from .config import PretrainConfig
from .encoder import DropPath
from .errors import NumericalError, ValidationError
from .semantic_attention import compute_satt
from .volume_data import Volume, ViewPair, random_crop_views, seeded_rng

log = logging.getLogger(__name__)

LOSS_FIELDS = ("step", "lr", "amip", "ampd", "aitd", "gitd", "total")


def deterministic_mode() -> bool:
    return os.environ.get("DAGMAN_DETERMINISTIC", "") == "1"


def configure_determinism(force: bool = False) -> None:
    if force or deterministic_mode():
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def lr_at(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay towards 0 at ``steps``."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


class CropSource:
    """Seeded two-view crops from an in-memory list of volumes.

    Batch ``step`` depends only on (seed, step), never on what was drawn before.
    """

    def __init__(self, volumes: Sequence[Volume], crop_shape, seed: int = 0):
        if not volumes:
            raise ValidationError("data: no volumes to train on", field="data")
        self.volumes = list(volumes)
        self.crop_shape = tuple(crop_shape)
        self.seed = seed

    def batch(self, step: int, size: int) -> list[ViewPair]:
        rng = seeded_rng(self.seed, step, 0xDA)
        picks = rng.integers(0, len(self.volumes), size=size)
        return [
            random_crop_views(self.volumes[int(j)], self.crop_shape, int(rng.integers(2**62)), source_id=str(int(j)))
            for j in picks
        ]


@dataclass
class LossReport:
    step: int
    lr: float
    amip: float
    ampd: float
    aitd: float
    gitd: float
    total: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in LOSS_FIELDS[1:]]


def _stack(vols: Sequence[Volume]) -> torch.Tensor:
    return torch.from_numpy(np.stack([v.data for v in vols]))[:, None]


class Trainer:
    """Owns the student/teacher pair, centers and optimizer for one pretraining run."""

    def __init__(self, cfg: PretrainConfig):
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        dist = cfg.distill
        self.student = DagmanModel(cfg.encoder, dist, cfg.student_path_drop)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()
        for m in self.teacher.modules():
            if isinstance(m, DropPath):
                m.p = 0.0
        self.centers = {
            "cls": torch.zeros(dist.k_cls),
            "patch": torch.zeros(dist.k_patch),
            "global": torch.zeros(dist.k_g),
        }
        decay, no_decay = [], []
        for name, p in self.student.named_parameters():
            (decay if p.dim() >= 2 and "pos_embed" not in name and "cls_token" not in name else no_decay).append(p)
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
            lr=cfg.base_lr,
        )
        self.step_num = 0
        self.counters: Counter = Counter()
        enc = self.student.encoder
        self.input_grid = enc.input_grid
        self.tap_grid = cfg.encoder.stage_grid(enc.tap_stage)
        self.sa_factor = tuple(i // t for i, t in zip(self.input_grid, self.tap_grid))

    @property
    def state(self) -> DistillState:
        return DistillState(self.student, self.teacher, self.centers, self.step_num)

    # --- masks --------------------------------------------------------------

    def _item_seed(self, step: int, item: int, stream: int) -> int:
        return int(seeded_rng(self.cfg.seed, step, item, stream).integers(2**62))

    def student_masks(self, satt: torch.Tensor | None, step: int, size: int) -> list[masking.MaskVector]:
        cfg, policy = self.cfg, self.cfg.mask
        n_in = math.prod(self.input_grid)
        out = []
        for i in range(size):
            seed = self._item_seed(step, i, 1)
            if cfg.masking_strategy == "attention":
                m = masking.attention_guided_mask(satt[i].double().numpy(), policy)
                m = masking.upsample_mask(masking.MaskVector(m.keep, self.tap_grid, m.strategy), self.sa_factor)
            elif cfg.masking_strategy == "low-attention":
                m = masking.low_attention_mask(satt[i].double().numpy(), policy)
                m = masking.upsample_mask(masking.MaskVector(m.keep, self.tap_grid, m.strategy), self.sa_factor)
            elif cfg.masking_strategy == "random":
                m = masking.random_mask(n_in, policy.r, seed, self.input_grid)
            else:
                m = masking.blockwise_mask(self.input_grid, policy.r, policy.block_shape, seed)
            out.append(m)
        return out

    def teacher_noise(self, step: int, size: int, stream: int) -> torch.Tensor:
        n_in = math.prod(self.input_grid)
        keeps = [
            masking.dropout_mask(n_in, self.cfg.mask.r_t, self._item_seed(step, i, stream), self.input_grid).keep
            for i in range(size)
        ]
        return torch.from_numpy(np.stack(keeps).astype(np.float32))

    # --- one step -----------------------------------------------------------

    def prepare(self, batch: Sequence[ViewPair]) -> dict:
        """Teacher pass and all masks for the current step (no gradients)."""
        cfg = self.cfg
        step = self.step_num
        dtype = next(self.student.parameters()).dtype
        u = _stack([vp.u for vp in batch]).to(dtype)
        v = _stack([vp.v for vp in batch]).to(dtype)
        B = u.shape[0]
        need_satt = cfg.masking_strategy in ("attention", "low-attention")

        if cfg.noisy_teacher:
            self.counters["patch_dropout"] += 1
            keep_u = self.teacher_noise(step, B, 2).to(dtype)
            keep_v = self.teacher_noise(step, B, 3).to(dtype)
        else:
            keep_u = keep_v = torch.ones(B, math.prod(self.input_grid), dtype=dtype)
        parts, keeps = [u, v], [keep_u, keep_v]
        # the attention ranking always comes from the clean view u
        clean_first = need_satt and cfg.noisy_teacher
        if clean_first:
            parts.insert(0, u)
            keeps.insert(0, torch.ones_like(keep_u))
        off = B if clean_first else 0
        t_u, t_v = slice(off, off + B), slice(off + B, off + 2 * B)
        # one encoder pass for every view; heads run per view so batch statistics never mix views
        with torch.no_grad():
            out = self.teacher.encoder(torch.cat(parts), torch.cat(keeps))
            t_pu = self.teacher.project(out, ("patch",), t_u)
            t_pv = self.teacher.project(out, ("cls", "global"), t_v)
        t = {"outputs": out, "patch": t_pu["patch"], "global": t_pv["global"]}
        if "cls" in t_pv:
            t["cls"] = t_pv["cls"]

        satt = None
        if need_satt:
            self.counters["satt_mask"] += 1
            satt = compute_satt(t["outputs"].cls_attention[:B])
        masks = self.student_masks(satt, step, B)
        keep_s = torch.from_numpy(np.stack([m.keep for m in masks]).astype(np.float32)).to(dtype)
        masked_sa = torch.from_numpy(np.stack([masking.masked_coverage(m, self.sa_factor) for m in masks])).to(dtype)
        self.counters["masked_input_tokens"] += int((1 - keep_s).sum())
        return {
            "u": u,
            "keep_s": keep_s,
            "masked_sa": masked_sa,
            "masks": masks,
            "satt": satt,
            "t_patch": t["patch"],
            "t_global": t["global"],
            "t_cls": t.get("cls"),
        }

    def compute_losses(self, prep: dict) -> dict[str, torch.Tensor]:
        """Student forward on the masked view and the four loss components plus the total."""
        dist, enc = self.cfg.distill, self.cfg.encoder
        u, keep_s = prep["u"], prep["keep_s"]
        s = self.student(u, keep_s)
        c = {k: v.to(u.dtype) for k, v in self.centers.items()}
        amip = loss_amip(s["pred"], u, 1 - keep_s, enc.stage_grid(4), enc.recon_block, self.input_grid, enc.patch_size)
        ampd = loss_ampd(sharpen(s["patch"], dist.tau_s), sharpen(prep["t_patch"], dist.tau_t, c["patch"]), prep["masked_sa"])
        gitd = loss_gitd(sharpen(s["global"], dist.tau_s), sharpen(prep["t_global"], dist.tau_t, c["global"]))
        if "cls" in s and prep["t_cls"] is not None:
            aitd = loss_aitd(sharpen(s["cls"], dist.tau_s), sharpen(prep["t_cls"], dist.tau_t, c["cls"]))
        else:
            aitd = torch.zeros((), dtype=u.dtype)
        total = total_loss(amip, ampd, aitd, gitd, dist)
        return {"amip": amip, "ampd": ampd, "aitd": aitd, "gitd": gitd, "total": total}

    def step(self, batch: Sequence[ViewPair], lr: float | None = None) -> LossReport:
        cfg, dist = self.cfg, self.cfg.distill
        step = self.step_num
        lr = lr_at(step, cfg) if lr is None else lr
        torch.manual_seed(cfg.seed * 1_000_003 + step)
        prep = self.prepare(batch)
        self.student.train()
        comp = self.compute_losses(prep)
        if not all(torch.isfinite(c) for c in comp.values()):
            dump = {k: float(c.detach()) for k, c in comp.items()}
            raise NumericalError(f"non-finite loss at step {step}: {dump}", dump)

        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        comp["total"].backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.student.parameters(), cfg.grad_clip)
        self.optimizer.step()

        ema_update(self.state, momentum_at(step, cfg.steps, dist.ema_momentum, dist.momentum_schedule))
        cm = dist.center_momentum
        self.centers["patch"] = update_center(self.centers["patch"], prep["t_patch"], cm)
        self.centers["global"] = update_center(self.centers["global"], prep["t_global"], cm)
        if prep["t_cls"] is not None:
            self.centers["cls"] = update_center(self.centers["cls"], prep["t_cls"], cm)
        self.step_num += 1
        return LossReport(step, lr, *(float(comp[k].detach()) for k in ("amip", "ampd", "aitd", "gitd", "total")))


def write_loss_header(path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(LOSS_FIELDS)


def append_loss(path, report: LossReport) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(report.row())


def read_loss_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in LOSS_FIELDS}


def pretrain(
    cfg: PretrainConfig,
    data: CropSource | Sequence[Volume],
    out_dir=None,
    trainer: Trainer | None = None,
    on_step: Callable[[LossReport], None] | None = None,
) -> Trainer:
    """Run ``cfg.steps`` steps. With ``out_dir``, writes ``loss.csv`` and ``checkpoint.dgmn``."""
    from .checkpoint import save_checkpoint

    if not isinstance(data, CropSource):
        data = CropSource(data, cfg.crop_shape, cfg.seed)
    trainer = trainer or Trainer(cfg)
    loss_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        loss_path = out_dir / "loss.csv"
        ckpt_path = out_dir / "checkpoint.dgmn"
        if trainer.step_num == 0:
            write_loss_header(loss_path)
    while trainer.step_num < cfg.steps:
        report = trainer.step(data.batch(trainer.step_num, cfg.batch_size))
        if loss_path is not None:
            append_loss(loss_path, report)
        if on_step is not None:
            on_step(report)
        if trainer.step_num % 20 == 0:
            log.info("step %d lr %.2e total %.4f", report.step, report.lr, report.total)
        if ckpt_path is not None and cfg.checkpoint_every and trainer.step_num % cfg.checkpoint_every == 0:
            save_checkpoint(trainer, ckpt_path)
    if ckpt_path is not None:
        save_checkpoint(trainer, ckpt_path)
    return trainer
