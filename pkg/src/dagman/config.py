"""Configuration dataclasses, validation and JSON presets."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ValidationError

STRATEGIES = ("attention", "random", "blockwise", "low-attention")


def _fail(path: str, msg: str):
    raise ValidationError(f"{path}: {msg}", field=path)


def _triple(value, path: str) -> tuple[int, int, int]:
    if isinstance(value, int):
        value = (value,) * 3
    try:
        t = tuple(int(v) for v in value)
    except (TypeError, ValueError):
        _fail(path, f"expected an integer triple, got {value!r}")
    if len(t) != 3 or min(t) < 1:
        _fail(path, f"expected three positive integers, got {value!r}")
    return t


@dataclass
class EncoderConfig:
    input_shape: tuple[int, int, int] = (32, 32, 32)
    patch_size: tuple[int, int, int] = (2, 2, 2)
    window_size: tuple[int, int, int] = (2, 2, 2)
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    stage_heads: tuple[int, ...] = (2, 2, 4, 4)
    embed_dim: int = 24
    sa_stage: int | None = 3
    sa_heads: int | None = None
    sa_depth: int = 2
    backbone: str = "hierarchical"
    mlp_ratio: float = 4.0
    mask_token: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = "encoder") -> "EncoderConfig":
        self.input_shape = _triple(self.input_shape, f"{prefix}.input_shape")
        self.patch_size = _triple(self.patch_size, f"{prefix}.patch_size")
        self.window_size = _triple(self.window_size, f"{prefix}.window_size")
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_heads = tuple(int(h) for h in self.stage_heads)
        if self.backbone not in ("hierarchical", "plain-vit"):
            _fail(f"{prefix}.backbone", f"must be 'hierarchical' or 'plain-vit', got {self.backbone!r}")
        if len(self.stage_depths) != 4 or min(self.stage_depths) < 1:
            _fail(f"{prefix}.stage_depths", f"need 4 positive depths, got {self.stage_depths}")
        if len(self.stage_heads) != 4 or min(self.stage_heads) < 1:
            _fail(f"{prefix}.stage_heads", f"need 4 positive head counts, got {self.stage_heads}")
        if self.embed_dim < 1:
            _fail(f"{prefix}.embed_dim", "must be >= 1")
        if self.sa_stage is not None and self.sa_stage not in (1, 2, 3, 4):
            _fail(f"{prefix}.sa_stage", f"must be in 1..4 or null, got {self.sa_stage}")
        if self.mlp_ratio <= 0:
            _fail(f"{prefix}.mlp_ratio", "must be > 0")
        if self.sa_depth < 1:
            _fail(f"{prefix}.sa_depth", "must be >= 1")
        if any(n % p for n, p in zip(self.input_shape, self.patch_size)):
            _fail(f"{prefix}.patch_size", f"{self.patch_size} does not divide input_shape {self.input_shape}")
        grid = self.stage_grid(1)
        for k in range(1, 5):
            if k > 1 and self.backbone == "hierarchical":
                if any(g % 2 for g in grid):
                    _fail(f"{prefix}.input_shape", f"stage {k - 1} grid {grid} is not evenly mergeable")
                grid = tuple(g // 2 for g in grid)
            win = self.stage_window(k)
            if any(g % w for g, w in zip(grid, win)):
                _fail(f"{prefix}.window_size", f"window {win} does not divide stage {k} grid {grid}")
            if self.stage_width(k) % self.stage_heads[k - 1]:
                _fail(
                    f"{prefix}.stage_heads",
                    f"{self.stage_heads[k - 1]} heads do not divide stage {k} width {self.stage_width(k)}",
                )
        if self.sa_stage is not None and self.stage_width(self.sa_stage) % self.sa_num_heads:
            _fail(f"{prefix}.sa_heads", f"{self.sa_num_heads} heads do not divide SA width")
        return self

    def stage_grid(self, k: int) -> tuple[int, int, int]:
        grid = tuple(n // p for n, p in zip(self.input_shape, self.patch_size))
        if self.backbone == "plain-vit":
            return grid
        return tuple(g >> (k - 1) for g in grid)

    def stage_width(self, k: int) -> int:
        if self.backbone == "plain-vit":
            return self.embed_dim
        return self.embed_dim * 2 ** (k - 1)

    def stage_window(self, k: int) -> tuple[int, int, int]:
        # plain-vit attends over the whole grid; Swin clamps windows to small grids
        grid = self.stage_grid(k)
        if self.backbone == "plain-vit":
            return grid
        return tuple(min(w, g) for w, g in zip(self.window_size, grid))

    def stage_shift(self, k: int) -> tuple[int, int, int]:
        grid = self.stage_grid(k)
        win = self.stage_window(k)
        return tuple(0 if g <= w else w // 2 for g, w in zip(grid, win))

    @property
    def sa_num_heads(self) -> int:
        if self.sa_heads is not None:
            return self.sa_heads
        return self.stage_heads[(self.sa_stage or 3) - 1]

    @property
    def out_width(self) -> int:
        return self.stage_width(4)

    @property
    def recon_block(self) -> tuple[int, int, int]:
        """Voxel extent covered by one stage-4 token."""
        f = 1 if self.backbone == "plain-vit" else 8
        return tuple(p * f for p in self.patch_size)


@dataclass
class DistillConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    ema_momentum: float = 0.996
    momentum_schedule: str = "cosine"
    center_momentum: float = 0.9
    lambda_aitd: float = 0.1
    lambda_ampd: float = 0.1
    lambda_gitd: float = 0.1
    k_cls: int = 512
    k_patch: int = 512
    k_g: int = 512
    head_hidden_mult: int = 4
    head_bottleneck: int = 64
    head_norm: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = "distill") -> "DistillConfig":
        if not (self.tau_s > 0):
            _fail(f"{prefix}.tau_s", "must be > 0")
        if not (self.tau_t > 0):
            _fail(f"{prefix}.tau_t", "must be > 0")
        if not 0 <= self.ema_momentum <= 1:
            _fail(f"{prefix}.ema_momentum", "must be in [0, 1]")
        if self.momentum_schedule not in ("cosine", "constant"):
            _fail(f"{prefix}.momentum_schedule", "must be 'cosine' or 'constant'")
        if not 0 <= self.center_momentum < 1:
            _fail(f"{prefix}.center_momentum", "must be in [0, 1)")
        for name in ("lambda_aitd", "lambda_ampd", "lambda_gitd"):
            if not getattr(self, name) >= 0:
                _fail(f"{prefix}.{name}", "must be >= 0")
        if self.head_norm not in ("none", "batch"):
            _fail(f"{prefix}.head_norm", f"must be 'none' or 'batch', got {self.head_norm!r}")
        for name in ("k_cls", "k_patch", "k_g", "head_hidden_mult", "head_bottleneck"):
            if getattr(self, name) < 1:
                _fail(f"{prefix}.{name}", "must be >= 1")
        return self


@dataclass
class MaskPolicy:
    r: float = 0.7
    s: float = 0.1
    r_t: float = 0.7
    block_shape: tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = "mask") -> "MaskPolicy":
        if not 0 <= self.r <= 1:
            _fail(f"{prefix}.r", f"must be in [0, 1], got {self.r}")
        if not 0 <= self.s < 1:
            _fail(f"{prefix}.s", f"must be in [0, 1), got {self.s}")
        if self.s > 0 and not self.s < self.r:
            _fail(f"{prefix}.s", f"hint ratio must be < masking ratio ({self.s} >= {self.r})")
        if not 0 <= self.r_t <= 1:
            _fail(f"{prefix}.r_t", f"must be in [0, 1], got {self.r_t}")
        self.block_shape = _triple(self.block_shape, f"{prefix}.block_shape")
        return self


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    mask: MaskPolicy = field(default_factory=MaskPolicy)
    masking_strategy: str = "attention"
    noisy_teacher: bool = True
    steps: int = 200
    warmup_steps: int = 20
    base_lr: float = 5e-4
    weight_decay: float = 0.04
    batch_size: int = 8
    crop_shape: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    student_path_drop: float = 0.1
    checkpoint_every: int = 0
    grad_clip: float | None = 3.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "PretrainConfig":
        self.encoder.validate()
        self.distill.validate()
        self.mask.validate()
        if self.masking_strategy not in STRATEGIES:
            _fail("masking_strategy", f"must be one of {STRATEGIES}, got {self.masking_strategy!r}")
        if self.steps < 0:
            _fail("steps", "must be >= 0")
        if not 0 <= self.warmup_steps <= self.steps:
            _fail("warmup_steps", f"must be in [0, steps={self.steps}], got {self.warmup_steps}")
        if not (self.base_lr > 0 and math.isfinite(self.base_lr)):
            _fail("base_lr", "must be > 0")
        if self.weight_decay < 0:
            _fail("weight_decay", "must be >= 0")
        if self.batch_size < 1:
            _fail("batch_size", "must be >= 1")
        self.crop_shape = _triple(self.crop_shape, "crop_shape")
        if self.crop_shape != self.encoder.input_shape:
            _fail("crop_shape", f"{self.crop_shape} must equal encoder.input_shape {self.encoder.input_shape}")
        if not 0 <= self.student_path_drop < 1:
            _fail("student_path_drop", "must be in [0, 1)")
        if self.masking_strategy in ("attention", "low-attention") and self.encoder.sa_stage is None:
            _fail("encoder.sa_stage", f"strategy {self.masking_strategy!r} needs the semantic attention module")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        sub = {}
        for name, typ in (("encoder", EncoderConfig), ("distill", DistillConfig), ("mask", MaskPolicy)):
            sub[name] = _build(typ, d.pop(name, {}), name)
        return _build(cls, d, "", **sub)


def _build(typ, d: dict, prefix: str, **extra):
    if not isinstance(d, dict):
        _fail(prefix or "config", "expected a JSON object")
    names = {f.name for f in dataclasses.fields(typ)}
    for key in d:
        if key not in names:
            _fail(f"{prefix}.{key}" if prefix else key, "unknown field")
    try:
        return typ(**d, **extra)
    except TypeError as exc:
        _fail(prefix or "config", str(exc))


def preset_path(name: str) -> Path:
    return Path(str(resources.files("dagman") / "presets" / f"{name}.json"))


def load_config(source: str | Path | dict | None = None, **overrides) -> PretrainConfig:
    """Load a config from a preset name, a JSON path or a dict, then apply top-level overrides."""
    if source is None:
        source = "desk"
    if isinstance(source, dict):
        d = source
    else:
        p = Path(source)
        if not p.exists() and preset_path(str(source)).exists():
            p = preset_path(str(source))
        try:
            d = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ValidationError(f"config: file not found: {source}", field="config") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config: invalid JSON ({exc})", field="config") from exc
    d = json.loads(json.dumps(d))
    for key, value in overrides.items():
        if value is None:
            continue
        target = d
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return PretrainConfig.from_dict(d)
