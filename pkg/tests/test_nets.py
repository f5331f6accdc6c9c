import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from glancefocus import nets
from glancefocus.errors import ContractError, FormatError, TrainingError
from glancefocus.focuspolicy import crop


def _f64(module):
    return module.double().eval()


def test_zero_frame_gives_zero_map():
    spec = nets.BackboneSpec.from_channels((4, 4), (2, 1), nonlinearity="identity")
    f = nets.ConvBackbone(spec, 16).eval()
    for m in f.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.zeros_(m.bias)
    out = nets.glance(f, torch.zeros(1, 16, 16))
    assert out.shape == (4, 8, 8) and torch.count_nonzero(out) == 0


def test_glance_is_pure():
    f = nets.ConvBackbone(nets.glance_spec(), 64).eval()
    x = torch.rand(1, 64, 64)
    assert torch.equal(nets.glance(f, x), nets.glance(f, x))


def test_glance_rejects_wrong_shape():
    f = nets.ConvBackbone(nets.glance_spec(), 64)
    with pytest.raises(ContractError):
        nets.glance(f, torch.rand(1, 32, 32))
    with pytest.raises(ContractError):
        nets.glance(f, torch.rand(64, 64))


def test_focus_rejects_wrong_patch_size():
    f = nets.ConvBackbone(nets.focus_spec(), 16)
    with pytest.raises(ContractError):
        nets.focus(f, torch.rand(1, 24, 24))


def test_crop_then_forward_equals_direct_forward():
    f = nets.ConvBackbone(nets.focus_spec(), 16).eval()
    frame = torch.rand(1, 64, 64)
    patch = frame[:, :16, :16].clone()
    assert torch.equal(nets.focus(f, crop(frame, (0, 0), 16)), nets.focus(f, patch))


def test_focus_net_is_heavier_than_glance_net():
    from glancefocus.costmodel import count_flops
    g, l = nets.ConvBackbone(nets.glance_spec()), nets.ConvBackbone(nets.focus_spec())
    assert nets.param_count(l) > nets.param_count(g)
    per_px_g = count_flops(nets.glance_spec(), (1, 64, 64)) / 64 ** 2
    per_px_l = count_flops(nets.focus_spec(), (1, 16, 16)) / 16 ** 2
    assert per_px_l > per_px_g


@pytest.mark.parametrize("which,side", [("glance", 64), ("focus", 16)])
def test_backbone_gradients_match_finite_differences(which, side):
    torch.manual_seed(0)
    spec = nets.glance_spec() if which == "glance" else nets.focus_spec()
    f = _f64(nets.ConvBackbone(spec, side))
    x = torch.rand(2, 1, side, side, dtype=torch.float64, requires_grad=True)
    w = torch.randn(spec.out_channels, dtype=torch.float64)
    params = [p for p in f.parameters()]
    err = nets.projected_gradcheck(lambda: (nets.pool(f(x)) * w).sum(), [x, *params], n_proj=20)
    assert err <= 1e-3


def test_single_pixel_gradient_matches_central_difference():
    torch.manual_seed(1)
    f = _f64(nets.ConvBackbone(nets.glance_spec(), 64))
    x = torch.rand(1, 64, 64, dtype=torch.float64, requires_grad=True)
    loss = lambda: nets.pool(nets.glance(f, x)).sum()
    (g,) = torch.autograd.grad(loss(), [x])
    h = 1e-5
    with torch.no_grad():
        x[0, 20, 31] += h
        up = float(loss())
        x[0, 20, 31] -= 2 * h
        down = float(loss())
        x[0, 20, 31] += h
    fd = (up - down) / (2 * h)
    assert abs(fd - float(g[0, 20, 31])) / max(abs(fd), 1e-8) <= 1e-3


def test_pool():
    assert torch.equal(nets.pool(torch.full((3, 4, 5), 2.5)), torch.full((3,), 2.5))
    one = torch.randn(6, 1, 1)
    assert torch.equal(nets.pool(one), one[:, 0, 0])
    fm = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
    assert float(nets.pool(fm)[0]) == 1.5


def test_recurrent_classifier_normalised_and_deterministic():
    torch.manual_seed(0)
    f_c = nets.RecurrentClassifier(10, 5, 8).eval()
    x1, x2 = torch.randn(4, 10), torch.randn(4, 10)
    p1, h1 = nets.classify_step(f_c, x1, f_c.init_state(4))
    p2, _ = nets.classify_step(f_c, x2, h1)
    assert torch.allclose(p2.sum(-1), torch.ones(4), atol=1e-6)
    q1, g1 = nets.classify_step(f_c, x1, f_c.init_state(4))
    q2, _ = nets.classify_step(f_c, x2, g1)
    assert torch.equal(p2, q2)


def test_recurrent_classifier_is_order_sensitive():
    torch.manual_seed(0)
    f_c = nets.RecurrentClassifier(10, 5, 8).eval()
    a, b = torch.randn(1, 10), torch.randn(1, 10)
    h0 = f_c.init_state(1)
    p_ab = nets.classify_step(f_c, b, nets.classify_step(f_c, a, h0)[1])[0]
    p_ba = nets.classify_step(f_c, a, nets.classify_step(f_c, b, h0)[1])[0]
    assert not torch.allclose(p_ab, p_ba, atol=1e-6)


def test_classifier_rejects_wrong_dim():
    f_c = nets.RecurrentClassifier(10, 5, 8)
    with pytest.raises(ContractError):
        f_c.step(torch.randn(1, 9), f_c.init_state(1))


def test_averaging_head():
    torch.manual_seed(0)
    f = nets.AveragingClassifier(6, 3)
    x = torch.randn(2, 6)
    p1, s = nets.classify_step_averaging(f, x, f.init_state(2))
    assert torch.allclose(p1, torch.softmax(f.head(x), -1))
    p2, _ = nets.classify_step_averaging(f, x, s)
    assert torch.allclose(p2, p1, atol=1e-7)
    # running mean of two fixed per-frame distributions
    f2 = nets.AveragingClassifier(2, 2)
    with torch.no_grad():
        f2.head.weight.copy_(torch.eye(2))
        f2.head.bias.zero_()
    logit = lambda p: torch.log(torch.tensor([p]))
    xa = logit([0.2, 0.8])
    xb = logit([0.6, 0.4])
    _, s = f2.step(xa, f2.init_state(1))
    pm, _ = f2.step(xb, s)
    assert torch.allclose(pm, torch.tensor([[0.4, 0.6]]), atol=1e-6)


@pytest.mark.parametrize("kind", ["recurrent", "averaging"])
def test_classifier_gradients(kind):
    torch.manual_seed(2)
    f_c = nets.make_classifier(kind, 12, 4, 8).double()
    xs = [torch.randn(3, 12, dtype=torch.float64, requires_grad=True) for _ in range(3)]
    y = torch.tensor([0, 2, 3])

    def loss():
        h = f_c.init_state(3, torch.float64)
        total = 0
        for x in xs:
            logp, h = f_c.step_log_probs(x, h)
            total = total - logp.gather(1, y[:, None]).sum()
        return total

    assert nets.projected_gradcheck(loss, [*xs, *f_c.parameters()]) <= 1e-3


def test_sgd_zero_grad_only_shrinks():
    p = nn.Parameter(torch.tensor([1.0, -2.0]))
    opt, sched = nets.make_sgd([p], lr=0.1, total_steps=10, momentum=0.0, weight_decay=1e-4)
    p.grad = torch.zeros_like(p)
    nets.sgd_step(opt, sched, 0)
    assert torch.allclose(p.detach(), torch.tensor([1.0, -2.0]) * (1 - 0.1 * 1e-4))


def test_sgd_quadratic_step():
    x = nn.Parameter(torch.tensor(1.0))
    opt, sched = nets.make_sgd([x], lr=0.1, total_steps=10, momentum=0.0, weight_decay=0.0)
    (x ** 2).backward()
    nets.sgd_step(opt, sched, 0)
    assert abs(x.item() - 0.8) < 1e-7


def test_cosine_schedule_ends_at_zero():
    assert nets.cosine_lr(0.05, 100, 100) == 0.0
    x = nn.Parameter(torch.tensor(1.0))
    opt, sched = nets.make_sgd([x], lr=0.1, total_steps=5)
    for s in range(5):
        x.grad = torch.zeros_like(x)
        nets.sgd_step(opt, sched, s)
    assert abs(opt.param_groups[0]["lr"]) < 1e-12


def test_nonfinite_gradient_raises_with_step():
    x = nn.Parameter(torch.tensor(1.0))
    opt = nets.make_adam([x])
    x.grad = torch.tensor(float("nan"))
    with pytest.raises(TrainingError, match="step 7"):
        nets.adam_step(opt, 7)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    mods = {"a": nets.ConvBackbone(nets.glance_spec()), "b": nets.RecurrentClassifier(4, 3, 5)}
    nets.save_checkpoint(tmp_path / "c.ckpt", mods, {"stage": "x"})
    meta, arrays = nets.read_checkpoint(tmp_path / "c.ckpt")
    assert meta["stage"] == "x"
    torch.manual_seed(1)
    fresh = {"a": nets.ConvBackbone(nets.glance_spec()), "b": nets.RecurrentClassifier(4, 3, 5)}
    nets.load_state(fresh, arrays)
    for k in mods:
        assert nets.param_hash(mods[k]) == nets.param_hash(fresh[k])


def test_checkpoint_shape_mismatch(tmp_path):
    nets.save_checkpoint(tmp_path / "c.ckpt", {"b": nets.RecurrentClassifier(4, 3, 5)}, {})
    _, arrays = nets.read_checkpoint(tmp_path / "c.ckpt")
    with pytest.raises(FormatError, match="b.cell"):
        nets.load_state({"b": nets.RecurrentClassifier(4, 3, 6)}, arrays)
