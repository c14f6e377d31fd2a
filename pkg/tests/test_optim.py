import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from iscl.errors import ShapeError
from iscl.models import BatchInstanceNorm2d
from iscl.optim import (
    AveragingState,
    OptimizerSpec,
    RAdam,
    lookahead_sync,
    lookahead_sync_,
    lr_at,
    make_radam,
    refresh_norm_statistics,
    swa_absorb,
    swa_absorb_,
)


def t(v):
    return {"w": torch.tensor([float(v)])}


# ---------------------------------------------------------------- schedule


def test_lr_examples():
    assert lr_at(0, 1000) == 1e-4
    assert lr_at(1000, 1000) == 1e-6
    assert lr_at(500, 1000) == pytest.approx(5.05e-5, rel=1e-12)


def test_lr_errors():
    with pytest.raises(ValueError):
        lr_at(0, 0)
    with pytest.raises(ValueError):
        lr_at(11, 10)
    with pytest.raises(ValueError):
        OptimizerSpec(lr_start=1e-6, lr_end=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10_000))
def test_lr_linear_and_bounded(total):
    lrs = np.array([lr_at(i, total) for i in range(total + 1)])
    assert np.all(np.diff(lrs) <= 0)
    assert lrs.min() >= 1e-6 and lrs.max() <= 1e-4
    assert np.abs(np.diff(lrs, 2)).max(initial=0) < 1e-18


# --------------------------------------------------------------------- SWA


@pytest.mark.parametrize("phi, theta, n, expected", [(7.0, 3.0, 0, 3.0), (0.0, 2.0, 1, 1.0), (1.0, 5.0, 3, 2.0)])
def test_swa_examples(phi, theta, n, expected):
    out, n2 = swa_absorb(t(phi), t(theta), n)
    assert out["w"].item() == expected and n2 == n + 1


def test_swa_shape_error():
    with pytest.raises(ShapeError):
        swa_absorb({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0)
    with pytest.raises(ShapeError):
        swa_absorb({"w": torch.zeros(2)}, {"v": torch.zeros(2)}, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_swa_is_arithmetic_mean(s, seed):
    g = torch.Generator().manual_seed(seed)
    snaps = [torch.randn(5, generator=g, dtype=torch.float64) for _ in range(s)]
    phi, n = {"w": torch.zeros(5, dtype=torch.float64)}, 0
    for th in snaps:
        phi, n = swa_absorb(phi, {"w": th}, n)
    assert n == s
    assert torch.allclose(phi["w"], torch.stack(snaps).mean(0), rtol=1e-6, atol=1e-12)


def test_swa_inplace_matches_functional():
    a, b = nn.Linear(3, 2), nn.Linear(3, 2)
    snaps = []
    n = 0
    for _ in range(7):
        with torch.no_grad():
            for p in b.parameters():
                p.normal_()
        snaps.append([p.detach().clone() for p in b.parameters()])
        n = swa_absorb_(a, b, n)
    assert n == 7
    for i, p in enumerate(a.parameters()):
        assert torch.allclose(p, torch.stack([s[i] for s in snaps]).mean(0), atol=1e-6)


# --------------------------------------------------------------- lookahead


@pytest.mark.parametrize("alpha, phi_exp", [(1.0, 10.0), (0.0, 0.0), (0.5, 5.0)])
def test_lookahead_examples(alpha, phi_exp):
    slow, fast = lookahead_sync(t(0.0), t(10.0), alpha)
    assert slow["w"].item() == phi_exp and fast["w"].item() == phi_exp


def test_lookahead_errors():
    with pytest.raises(ValueError):
        lookahead_sync(t(0), t(1), 1.5)
    with pytest.raises(ShapeError):
        lookahead_sync({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        AveragingState(swa_start_epoch=0, cycle_length=1, lookahead_alpha=-0.1)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(-5, 5))
def test_lookahead_idempotent_when_equal(alpha, v):
    slow, fast = lookahead_sync(t(v), t(v), alpha)
    assert slow["w"].item() == pytest.approx(v) and fast["w"].item() == pytest.approx(v)


def test_lookahead_inplace():
    slow, fast = nn.Linear(2, 2), nn.Linear(2, 2)
    with torch.no_grad():
        for p in slow.parameters():
            p.fill_(0.0)
        for p in fast.parameters():
            p.fill_(10.0)
    lookahead_sync_(slow, fast, 0.5)
    for p, q in zip(slow.parameters(), fast.parameters()):
        assert torch.all(p == 5.0) and torch.all(q == 5.0)


# ------------------------------------------------------------------ RAdam


def _run(opt_cls, steps=40, **kw):
    torch.manual_seed(0)
    net = nn.Linear(4, 3)
    opt = opt_cls(net.parameters(), lr=1e-2, **kw)
    x = torch.randn(16, 4)
    for _ in range(steps):
        opt.zero_grad()
        ((net(x) - 1) ** 2).mean().backward()
        opt.step()
    return [p.detach() for p in net.parameters()]


def test_radam_matches_torch_when_degenerating():
    ours = _run(RAdam, degenerate_to_sgd=True)
    ref = _run(torch.optim.RAdam)
    for a, b in zip(ours, ref):
        assert torch.allclose(a, b, atol=1e-6)


def test_radam_holds_still_during_warmup():
    torch.manual_seed(0)
    net = nn.Linear(4, 3)
    before = [p.detach().clone() for p in net.parameters()]
    opt = RAdam(net.parameters(), lr=1e-2)
    x = torch.randn(16, 4)
    moved_at = None
    for step in range(1, 10):
        opt.zero_grad()
        net(x).sum().backward()
        opt.step()
        if moved_at is None and any(not torch.equal(a, b) for a, b in zip(before, net.parameters())):
            moved_at = step
    # the rectifier term becomes defined (> 5) at step 6 for beta2 = 0.999
    assert moved_at == 6


def test_radam_zero_gradient_leaves_params():
    net = nn.Linear(3, 3)
    opt = make_radam(net.parameters())
    before = [p.detach().clone() for p in net.parameters()]
    for _ in range(20):
        opt.zero_grad()
        (0.0 * net(torch.randn(2, 3)).sum()).backward()
        opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


# ------------------------------------------------------ statistics refresh


def test_refresh_statistics_exact_average():
    net = nn.Sequential(nn.Conv2d(1, 2, 1), BatchInstanceNorm2d(2))
    batches = [torch.randn(4, 1, 8, 8) + i for i in range(3)]
    refresh_norm_statistics(net, batches)
    with torch.no_grad():
        feats = [net[0](b) for b in batches]
    expected = torch.stack([f.mean(dim=(0, 2, 3)) for f in feats]).mean(0)
    assert torch.allclose(net[1].running_mean, expected, atol=1e-5)
    with pytest.raises(ValueError):
        refresh_norm_statistics(net, [])
