import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import tiny_config, tiny_volumes
from dagman.codistill import (
    DistillState,
    ProjectionHead,
    cross_entropy,
    ema_update,
    fold_blocks,
    loss_aitd,
    loss_amip,
    loss_ampd,
    loss_gitd,
    momentum_at,
    project_and_sharpen,
    sharpen,
    total_loss,
    update_center,
)
from dagman.config import DistillConfig
from dagman.errors import ValidationError
from dagman.trainer import CropSource, Trainer


def rand_dist(rng, *shape):
    return torch.from_numpy(rng.dirichlet(np.ones(shape[-1]), size=shape[:-1]))


def entropy(p):
    return float(-(p * torch.log(p)).sum(-1).mean())


def test_sharpen_constant_logits_is_uniform():
    for tau in (0.01, 0.1, 3.0):
        p = sharpen(torch.full((2, 5), 1.7, dtype=torch.float64), tau)
        np.testing.assert_allclose(p.numpy(), 0.2, atol=1e-15)
    p = sharpen(torch.tensor([0.0, 1.0, 0.5]), 1.0)
    assert not torch.allclose(p, torch.full((3,), 1 / 3))


def test_low_temperature_concentrates():
    logits = torch.tensor([0.0, 1.0, -2.0, 0.3], dtype=torch.float64)
    p = sharpen(logits, 0.01)
    assert float(p[1]) > 0.99


def test_centering_with_logits_gives_uniform():
    logits = torch.randn(3, 6)
    p = sharpen(logits, 0.04, center=logits)
    np.testing.assert_allclose(p.numpy(), 1 / 6, atol=1e-7)


def test_temperature_must_be_positive():
    with pytest.raises(ValidationError, match="tau"):
        sharpen(torch.zeros(3), 0.0)


def test_project_and_sharpen_rows_sum_to_one():
    head = ProjectionHead(8, 32, 16, bottleneck=4)
    p = project_and_sharpen(torch.randn(3, 5, 8), head, 0.1, center=torch.randn(32))
    assert p.shape == (3, 5, 32)
    torch.testing.assert_close(p.sum(-1), torch.ones(3, 5), atol=1e-5, rtol=0)


def test_projection_head_logits_are_cosines():
    head = ProjectionHead(8, 32, 16, bottleneck=4, norm="batch")
    logits = head(torch.randn(6, 8))
    assert logits.shape == (6, 32) and float(logits.detach().abs().max()) <= 1 + 1e-6
    assert not list(head.buffers())
    with pytest.raises(ValidationError) as exc:
        ProjectionHead(8, 32, 16, norm="layer")
    assert exc.value.field == "distill.head_norm"


@pytest.mark.parametrize("loss", [loss_aitd, loss_gitd])
def test_ce_at_equality_is_entropy(loss):
    p = rand_dist(np.random.default_rng(0), 4, 8)
    assert abs(float(loss(p, p)) - entropy(p)) < 1e-6


@pytest.mark.parametrize("loss", [loss_aitd, loss_gitd])
def test_ce_one_hot_teacher(loss):
    ps = rand_dist(np.random.default_rng(1), 1, 8)
    pt = F.one_hot(torch.tensor([5]), 8).double()
    assert abs(float(loss(ps, pt)) + math.log(float(ps[0, 5]))) < 1e-12


@pytest.mark.parametrize("loss", [loss_aitd, loss_gitd])
def test_ce_matches_direct_sum(loss):
    rng = np.random.default_rng(2)
    ps, pt = rand_dist(rng, 3, 8), rand_dist(rng, 3, 8)
    a, b = ps.numpy(), pt.numpy()
    want = np.mean([-sum(b[i, k] * math.log(a[i, k]) for k in range(8)) for i in range(3)])
    assert abs(float(loss(ps, pt)) - want) < 1e-6


def test_ce_clamps_zero_probabilities():
    ps = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    pt = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert float(cross_entropy(pt, ps)[0]) == pytest.approx(-0.5 * math.log(1e-12))


def test_ce_no_gradient_to_teacher():
    ps = torch.full((1, 4), 0.25, requires_grad=True)
    pt = torch.full((1, 4), 0.25, requires_grad=True)
    loss_aitd(ps, pt).backward()
    assert pt.grad is None and ps.grad is not None


def test_ce_shape_mismatch():
    with pytest.raises(ValidationError, match="p_t_cls"):
        loss_aitd(torch.full((2, 4), 0.25), torch.full((2, 5), 0.2))


def test_ampd_identities():
    rng = np.random.default_rng(3)
    ps, pt = rand_dist(rng, 2, 27, 8), rand_dist(rng, 2, 27, 8)
    assert float(loss_ampd(ps, pt, torch.zeros(27))) == 0.0
    m = torch.zeros(27)
    m[11] = 1
    single = float(loss_ampd(ps[:1], pt[:1], m))
    assert single == pytest.approx(float(cross_entropy(pt[0, 11], ps[0, 11])), abs=1e-12)


def test_ampd_matches_oracle():
    rng = np.random.default_rng(4)
    ps, pt = rand_dist(rng, 27, 8), rand_dist(rng, 27, 8)
    m = (rng.random(27) < 0.4).astype(np.float64)
    a, b = ps.numpy(), pt.numpy()
    want = sum(m[i] * -sum(b[i, k] * math.log(a[i, k]) for k in range(8)) for i in range(27)) / m.sum()
    assert abs(float(loss_ampd(ps, pt, m)) - want) < 1e-6


def test_ampd_ignores_visible_tokens():
    rng = np.random.default_rng(5)
    ps, pt = rand_dist(rng, 27, 8), rand_dist(rng, 27, 8)
    m = torch.from_numpy((rng.random(27) < 0.5).astype(np.float64))
    base = float(loss_ampd(ps, pt, m))
    vis = m == 0
    ps2, pt2 = ps.clone(), pt.clone()
    ps2[vis], pt2[vis] = rand_dist(rng, int(vis.sum()), 8), rand_dist(rng, int(vis.sum()), 8)
    assert float(loss_ampd(ps2, pt2, m)) == base


def test_ampd_token_count_mismatch():
    with pytest.raises(ValidationError, match="token counts"):
        loss_ampd(torch.full((5, 4), 0.25), torch.full((5, 4), 0.25), torch.ones(6))


def test_amip_constants_and_empty_mask():
    pred = torch.full((1, 8, 8), 0.75, dtype=torch.float64)
    target = torch.full((1, 4, 4, 4), -0.5, dtype=torch.float64)
    layout = ((2, 2, 2), (2, 2, 2), (4, 4, 4), (1, 1, 1))
    m = torch.zeros(1, 64, dtype=torch.float64)
    assert float(loss_amip(pred, target, m, *layout)) == 0.0
    m[0, ::3] = 1
    assert float(loss_amip(pred, target, m, *layout)) == 1.25
    assert float(loss_amip(target.reshape(1, 2, 2, 2, 2, 2, 2).permute(0, 1, 3, 5, 2, 4, 6).reshape(1, 8, 8), target, m, *layout)) == 0.0


def test_amip_matches_voxel_oracle_and_ignores_visible():
    rng = np.random.default_rng(6)
    pred = torch.from_numpy(rng.normal(size=(2, 8, 64)))  # stage-4 grid 2^3, block 4^3
    target = torch.from_numpy(rng.normal(size=(2, 8, 8, 8)))
    tokens = torch.from_numpy((rng.random((2, 64)) < 0.5).astype(np.float64))  # input grid 4^3, patch 2^3
    layout = ((2, 2, 2), (4, 4, 4), (4, 4, 4), (2, 2, 2))
    got = float(loss_amip(pred, target, tokens, *layout))
    per_item = []
    for b in range(2):
        num = den = 0.0
        for z in range(8):
            for y in range(8):
                for x in range(8):
                    if tokens[b, (z // 2) * 16 + (y // 2) * 4 + x // 2] == 1:
                        tok = (z // 4) * 4 + (y // 4) * 2 + x // 4
                        off = (z % 4) * 16 + (y % 4) * 4 + x % 4
                        num += abs(float(pred[b, tok, off]) - float(target[b, z, y, x]))
                        den += 1
        per_item.append(num / den)
    assert abs(got - np.mean(per_item)) < 1e-6
    target2 = target.clone()
    vis = (tokens.reshape(2, 4, 4, 4).repeat_interleave(2, 1).repeat_interleave(2, 2).repeat_interleave(2, 3)) == 0
    target2[vis] = 1e3
    assert float(loss_amip(pred, target2, tokens, *layout)) == got


def test_amip_resolution_mismatch():
    with pytest.raises(ValidationError, match="mask"):
        loss_amip(torch.zeros(1, 8, 8), torch.zeros(1, 4, 4, 4), torch.zeros(1, 27), (2, 2, 2), (2, 2, 2), (4, 4, 4), (1, 1, 1))
    with pytest.raises(ValidationError, match="layout"):
        fold_blocks(torch.zeros(1, 7, 8), (2, 2, 2), (2, 2, 2))


def test_total_loss_weights():
    one = torch.tensor(1.0)
    assert float(total_loss(one, one, one, one, DistillConfig())) == pytest.approx(1.3)
    zero = DistillConfig(lambda_aitd=0, lambda_ampd=0, lambda_gitd=0)
    assert float(total_loss(torch.tensor(2.5), one, one, one, zero)) == 2.5
    parts = [torch.tensor(v) for v in (0.3, 1.1, 2.0, 0.7)]
    doubled = [2 * p for p in parts]
    assert float(total_loss(*doubled, DistillConfig())) == pytest.approx(2 * float(total_loss(*parts, DistillConfig())))


def _pair(t_val, s_val):
    s, t = torch.nn.Linear(1, 1, bias=False), torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        s.weight.fill_(s_val)
        t.weight.fill_(t_val)
    return DistillState(s, t)


def test_ema_identities():
    st = _pair(2.0, 4.0)
    assert float(ema_update(st, 1.0).teacher.weight.detach()) == 2.0
    assert float(ema_update(st, 0.5).teacher.weight.detach()) == 3.0
    assert float(ema_update(st, 0.0).teacher.weight.detach()) == 4.0
    assert float(st.student.weight.detach()) == 4.0


def test_ema_is_contraction():
    torch.manual_seed(0)
    s, t = torch.nn.Linear(5, 3), torch.nn.Linear(5, 3)
    gap = [(pt - ps).detach().clone() for pt, ps in zip(t.parameters(), s.parameters())]
    ema_update(DistillState(s, t), 0.75)
    for g, pt, ps in zip(gap, t.parameters(), s.parameters()):
        torch.testing.assert_close((pt - ps).abs(), 0.75 * g.abs(), atol=1e-6, rtol=0)


def test_ema_shape_mismatch():
    with pytest.raises(ValidationError, match="shape"):
        ema_update(DistillState(torch.nn.Linear(2, 3), torch.nn.Linear(3, 3)), 0.5)


def test_center_updates():
    logits = torch.tensor([[1.0, 2.0], [3.0, 6.0]], dtype=torch.float64)
    c = update_center(torch.tensor([10.0, 10.0], dtype=torch.float64), logits, 0.0)
    assert c.tolist() == [2.0, 4.0]
    c = torch.zeros(1, dtype=torch.float64)
    for _ in range(2):
        c = update_center(c, torch.tensor([[5.0]], dtype=torch.float64), 0.9)
    assert float(c) == pytest.approx(5.0 * (1 - 0.9**2), abs=1e-12)
    for _ in range(400):
        c = update_center(c, torch.tensor([[5.0]], dtype=torch.float64), 0.9)
    assert float(c) == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ValidationError):
        update_center(c, logits, 1.0)


def test_momentum_schedule():
    assert momentum_at(0, 100, 0.996) == pytest.approx(0.996)
    assert momentum_at(100, 100, 0.996) == pytest.approx(1.0)
    assert momentum_at(50, 100, 0.996, "constant") == 0.996


def fd_gradient_check(head_norm, n_params=240, h=1e-4):
    """Analytic vs central-difference d(total)/d(theta_s) in float64; returns (num, ana) pairs."""
    # batch 4: with two samples the batch-normalised head is curved enough that h=1e-4 truncation reaches 1e-3
    cfg = tiny_config(batch_size=4, distill=DistillConfig(
        k_cls=16, k_patch=16, k_g=16, head_hidden_mult=2, head_bottleneck=8, head_norm=head_norm))
    tr = Trainer(cfg)
    tr.student.double()
    tr.teacher.double()
    gen = torch.Generator().manual_seed(1)
    tr.centers = {k: 0.1 * torch.randn(v.shape, generator=gen, dtype=torch.float64) for k, v in tr.centers.items()}
    prep = tr.prepare(CropSource(tiny_volumes(), cfg.crop_shape).batch(0, 4))
    tr.student.train()

    total = tr.compute_losses(prep)["total"]
    params = [p for p in tr.student.parameters()]
    grads = torch.autograd.grad(total, params, allow_unused=True)
    rng = np.random.default_rng(0)
    sizes = np.array([p.numel() for p in params])
    picks = [(int(i), int(rng.integers(sizes[i]))) for i in rng.choice(len(params), n_params, p=sizes / sizes.sum())]
    pairs = []
    with torch.no_grad():
        for i, j in picks:
            flat = params[i].view(-1)
            orig = float(flat[j])
            flat[j] = orig + h
            up = float(tr.compute_losses(prep)["total"])
            flat[j] = orig - h
            down = float(tr.compute_losses(prep)["total"])
            flat[j] = orig
            ana = 0.0 if grads[i] is None else float(grads[i].view(-1)[j])
            pairs.append(((up - down) / (2 * h), ana))
    return pairs


@pytest.mark.parametrize("head_norm", ["none", "batch"])
def test_total_loss_gradient_matches_finite_differences(head_norm):
    pairs = fd_gradient_check(head_norm)
    for num, ana in pairs:
        assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana)) + 1e-9, (num, ana)
    assert len(pairs) >= 200
