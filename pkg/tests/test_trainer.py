import hashlib
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_volumes
from dagman.config import DistillConfig, MaskPolicy, PretrainConfig, load_config
from dagman.errors import NumericalError, ValidationError
from dagman.trainer import CropSource, Trainer, lr_at, pretrain, read_loss_csv


def param_hash(module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def frozen_teacher(**kw):
    dist = DistillConfig(k_cls=16, k_patch=16, k_g=16, head_hidden_mult=2, head_bottleneck=8,
                         ema_momentum=1.0, momentum_schedule="constant")
    return tiny_config(distill=dist, **kw)


def test_schedule_endpoints():
    cfg = tiny_config(steps=100, warmup_steps=10, base_lr=1e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(5e-4)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    increment = lr_at(98, cfg) - lr_at(99, cfg)
    assert 0 <= lr_at(99, cfg) <= increment + 1e-12
    lrs = [lr_at(s, cfg) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValidationError) as exc:
        tiny_config(steps=5, warmup_steps=6)
    assert exc.value.field == "warmup_steps"
    with pytest.raises(ValidationError) as exc:
        tiny_config(masking_strategy="checkerboard")
    assert exc.value.field == "masking_strategy"
    with pytest.raises(ValidationError) as exc:
        load_config({"distill": {"tau_t": 0}})
    assert exc.value.field == "distill.tau_t"


def test_presets_load():
    desk = load_config("desk")
    assert desk.encoder.input_shape == (32, 32, 32) and desk.encoder.embed_dim == 24
    assert desk.encoder.stage_depths == (1, 1, 2, 1) and desk.batch_size == 8 and desk.steps == 200
    paper = load_config("paper")
    assert paper.base_lr == 8e-4 and paper.warmup_steps == 80 and paper.student_path_drop == 0.1
    assert paper.distill.lambda_aitd == paper.distill.lambda_gitd == 0.1


def test_zero_steps_checkpoint_is_initialization(tmp_path):
    from dagman.checkpoint import read_checkpoint

    cfg = tiny_config(steps=0, warmup_steps=0)
    pretrain(cfg, tiny_volumes(), tmp_path)
    ckpt = read_checkpoint(tmp_path / "checkpoint.dgmn")
    fresh = Trainer(cfg)
    for name, t in fresh.student.state_dict().items():
        assert torch.equal(ckpt.tensors[f"student.{name}"], t)
    assert ckpt.step == 0
    assert read_loss_csv(tmp_path / "loss.csv")["step"].size == 0


def test_frozen_configuration_is_a_no_op():
    cfg = frozen_teacher()
    tr = Trainer(cfg)
    s0, t0 = param_hash(tr.student), param_hash(tr.teacher)
    batch = CropSource(tiny_volumes(), cfg.crop_shape).batch(0, cfg.batch_size)
    tr.step(batch, lr=0.0)
    assert param_hash(tr.student) == s0 and param_hash(tr.teacher) == t0


def test_teacher_never_optimizer_updated():
    cfg = frozen_teacher(steps=50, warmup_steps=5)
    tr = Trainer(cfg)
    t0, s0 = param_hash(tr.teacher), param_hash(tr.student)
    optimized = {id(p) for g in tr.optimizer.param_groups for p in g["params"]}
    assert not optimized & {id(p) for p in tr.teacher.parameters()}
    pretrain(cfg, tiny_volumes(), trainer=tr)
    assert tr.step_num == 50
    assert param_hash(tr.teacher) == t0
    assert param_hash(tr.student) != s0


def test_random_masking_count_passthrough():
    cfg = tiny_config(masking_strategy="random", mask=MaskPolicy(r=0.7))
    tr = Trainer(cfg)
    prep = tr.prepare(CropSource(tiny_volumes(), cfg.crop_shape).batch(0, 2))
    n = 8**3
    assert ((1 - prep["keep_s"]).sum(dim=1) == math.floor(0.7 * n)).all()
    assert tr.counters["masked_input_tokens"] == 2 * math.floor(0.7 * n)


def test_baseline_skips_attention_and_dropout_paths():
    cfg = tiny_config(masking_strategy="random", noisy_teacher=False, steps=3)
    tr = pretrain(cfg, tiny_volumes())
    assert tr.counters["satt_mask"] == 0 and tr.counters["patch_dropout"] == 0
    cfg = tiny_config(masking_strategy="attention", steps=3)
    tr = pretrain(cfg, tiny_volumes())
    assert tr.counters["satt_mask"] == 3 and tr.counters["patch_dropout"] == 3


@pytest.mark.parametrize("strategy", ["attention", "random", "blockwise", "low-attention"])
def test_loss_components_finite_and_nonnegative(strategy):
    cfg = tiny_config(masking_strategy=strategy, mask=MaskPolicy(block_shape=(2, 2, 2)), steps=3)
    reports = []
    pretrain(cfg, tiny_volumes(), on_step=reports.append)
    for r in reports:
        for k in ("amip", "ampd", "aitd", "gitd", "total"):
            v = getattr(r, k)
            assert math.isfinite(v) and v >= 0


def test_replay_is_bitwise(tmp_path):
    cfg = tiny_config(steps=4)
    pretrain(cfg, tiny_volumes(), tmp_path / "a")
    pretrain(cfg, tiny_volumes(), tmp_path / "b")
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.dgmn").read_bytes() == (tmp_path / "b" / "checkpoint.dgmn").read_bytes()


def test_non_finite_loss_aborts_with_dump():
    cfg = tiny_config()
    tr = Trainer(cfg)
    with torch.no_grad():
        tr.student.predictor.bias.fill_(float("nan"))
    with pytest.raises(NumericalError) as exc:
        tr.step(CropSource(tiny_volumes(), cfg.crop_shape).batch(0, 2))
    assert math.isnan(exc.value.components["amip"])


def test_crop_source_is_stateless():
    src = CropSource(tiny_volumes(), (8, 8, 8), seed=3)
    a = src.batch(5, 2)
    src.batch(0, 2)
    b = src.batch(5, 2)
    assert all(np.array_equal(x.u.data, y.u.data) and np.array_equal(x.v.data, y.v.data) for x, y in zip(a, b))
    with pytest.raises(ValidationError, match="data"):
        CropSource([], (8, 8, 8))


def test_default_config_is_desk_sized():
    cfg = PretrainConfig()
    assert cfg.crop_shape == cfg.encoder.input_shape == (32, 32, 32)
