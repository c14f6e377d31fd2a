import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from iscl.errors import DegenerateStatisticsError, ShapeError
from iscl.models import (
    BatchInstanceNorm2d,
    Discriminator,
    DiscriminatorConfig,
    Extractor,
    ExtractorConfig,
    Generator,
    GeneratorConfig,
    ModelBundle,
    ModelConfig,
    batch_instance_norm,
    clamp_gates_,
    count_parameters,
    forward_discriminator,
    forward_extractor,
    forward_generator,
    tiled_forward,
)

SMALL_G = GeneratorConfig(base_width=4, n_residual_blocks=1)
SMALL_H = ExtractorConfig(depth=3, width=4)
SMALL_D = DiscriminatorConfig(base_width=4)


def bn_ref(x, eps=1e-5):
    m = x.mean(dim=(0, 2, 3), keepdim=True)
    v = x.var(dim=(0, 2, 3), keepdim=True, unbiased=False)
    return (x - m) / torch.sqrt(v + eps)


def in_ref(x, eps=1e-5):
    m = x.mean(dim=(2, 3), keepdim=True)
    v = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - m) / torch.sqrt(v + eps)


# ------------------------------------------------------ batch-instance norm


@pytest.mark.parametrize("rho, ref", [(1.0, bn_ref), (0.0, in_ref)])
def test_bin_endpoints(rho, ref):
    x = torch.randn(4, 3, 5, 6) * 2 + 1
    layer = BatchInstanceNorm2d(3).train()
    with torch.no_grad():
        layer.rho.fill_(rho)
    assert torch.allclose(layer(x), ref(x), atol=1e-5)
    g, b, r = torch.ones(3), torch.zeros(3), torch.full((3,), rho)
    assert torch.allclose(batch_instance_norm(x, g, b, r), ref(x), atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 1), st.integers(2, 4))
def test_bin_matches_mixture(rho, n):
    x = torch.randn(n, 2, 4, 4, generator=torch.Generator().manual_seed(n))
    layer = BatchInstanceNorm2d(2).train()
    with torch.no_grad():
        layer.rho.fill_(rho)
        layer.weight.copy_(torch.tensor([2.0, 0.5]))
        layer.bias.copy_(torch.tensor([0.1, -0.3]))
    w, b = layer.weight[None, :, None, None], layer.bias[None, :, None, None]
    expected = w * (rho * bn_ref(x) + (1 - rho) * in_ref(x)) + b
    assert torch.allclose(layer(x), expected, atol=1e-5)
    assert torch.allclose(batch_instance_norm(x, layer.weight, layer.bias, layer.rho), expected, atol=1e-5)


def test_bin_constant_channel_is_zero():
    x = torch.full((3, 2, 4, 4), 0.7)
    for rho in (0.0, 0.3, 1.0):
        layer = BatchInstanceNorm2d(2).train()
        with torch.no_grad():
            layer.rho.fill_(rho)
        assert layer(x).abs().max() < 1e-5  # float rounding of the mean, scaled by 1/sqrt(eps)


def test_bin_single_sample():
    layer = BatchInstanceNorm2d(2)
    x = torch.randn(1, 2, 4, 4)
    with pytest.raises(DegenerateStatisticsError):
        layer.train()(x)
    with pytest.raises(DegenerateStatisticsError):
        batch_instance_norm(x, torch.ones(2), torch.zeros(2), torch.full((2,), 0.5))
    out = layer.eval()(x)
    assert out.shape == x.shape and torch.isfinite(out).all()


def test_bin_running_stats_only_in_training():
    layer = BatchInstanceNorm2d(2)
    x = torch.randn(4, 2, 4, 4) + 3
    layer.eval()(x)
    assert torch.equal(layer.running_mean, torch.zeros(2))
    layer.train()(x)
    assert not torch.equal(layer.running_mean, torch.zeros(2))


def test_bin_eval_matches_functional():
    layer = BatchInstanceNorm2d(3)
    layer.train()(torch.randn(5, 3, 6, 6) * 3)
    layer.eval()
    x = torch.randn(2, 3, 6, 6)
    ref = batch_instance_norm(x, layer.weight, layer.bias, layer.rho, layer.running_mean, layer.running_var,
                              training=False)
    assert torch.allclose(layer(x), ref, atol=1e-5)


def test_clamp_gates():
    g = Generator(SMALL_G)
    with torch.no_grad():
        for m in g.modules():
            if isinstance(m, BatchInstanceNorm2d):
                m.rho.uniform_(-1, 2)
    clamp_gates_(g)
    for m in g.modules():
        if isinstance(m, BatchInstanceNorm2d):
            assert m.rho.min() >= 0 and m.rho.max() <= 1


# ---------------------------------------------------------------- networks


@pytest.mark.parametrize("shape", [(4, 1, 64, 64), (1, 1, 96, 96), (2, 1, 16, 16), (2, 1, 17, 23)])
def test_generator_shapes(shape):
    g = Generator(SMALL_G).eval()
    assert forward_generator(g, torch.rand(shape)).shape == shape


def test_generator_errors():
    g = Generator(SMALL_G)
    with pytest.raises(ShapeError):
        g(torch.rand(2, 1, 8, 8))
    with pytest.raises(ShapeError):
        g(torch.rand(2, 3, 32, 32))


def test_generator_zero_head_is_skip():
    g = Generator(SMALL_G).train()
    with torch.no_grad():
        g.head.weight.zero_()
        g.head.bias.zero_()
    x = torch.rand(3, 1, 32, 32)
    assert torch.equal(g(x), x)


def test_extractor_residual_semantics():
    h = Extractor(SMALL_H).eval()
    x = torch.rand(2, 1, 64, 64)
    assert forward_extractor(h, x).shape == x.shape
    with torch.no_grad():
        for p in h.parameters():
            p.zero_()
    assert torch.equal(h(x), torch.zeros_like(x))
    assert torch.equal(x - h(x), x)


def test_extractor_finite_default():
    h = Extractor().train()
    out = h(torch.rand(2, 1, 64, 64))
    assert torch.isfinite(out).all()


def test_discriminator_scores():
    d = Discriminator(SMALL_D).eval()
    x = torch.rand(3, 1, 64, 64)
    s = forward_discriminator(d, x)
    assert s.shape == (3,)
    perm = torch.tensor([2, 0, 1])
    assert torch.allclose(d(x[perm]), s[perm], atol=1e-6)
    d.train()
    assert torch.allclose(d(x[perm]), d(x)[perm], atol=1e-6)
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    assert torch.equal(d(x), torch.zeros(3))


def test_discriminator_small_input():
    d = Discriminator(SMALL_D)
    assert d.receptive_field <= 64
    with pytest.raises(ShapeError):
        d(torch.rand(1, 1, d.receptive_field - 1, 64))


def test_discriminator_rf_limit():
    with pytest.raises(ValueError):
        Discriminator(DiscriminatorConfig(n_downsamples=5))


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(base_width=0)
    with pytest.raises(ValueError):
        GeneratorConfig(norm="batch")
    with pytest.raises(ValueError):
        ExtractorConfig(depth=2)


def test_every_parameter_gets_gradient():
    torch.manual_seed(0)
    x = torch.rand(2, 1, 64, 64)
    for net in (Generator(SMALL_G), Extractor(SMALL_H), Discriminator(SMALL_D)):
        net.train()
        out = net(x)
        (out.float() ** 2).sum().backward() if out.dim() == 4 else out.sum().backward()
        for name, p in net.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_inference_deterministic():
    b = ModelBundle.build(ModelConfig(SMALL_G, SMALL_H, SMALL_D), seed=3).eval()
    x = torch.rand(2, 1, 64, 64)
    for k, net in b.theta.items():
        assert torch.equal(net(x), net(x)), k


# -------------------------------------------------------------- parameters


def test_count_parameters():
    assert count_parameters(nn.Conv2d(1, 8, 3)) == 80
    assert count_parameters([torch.zeros(3, 4), torch.zeros(5)]) == 17


def test_bundle_counts_default():
    b = ModelBundle.build()
    c = b.parameter_counts()
    assert c["F"] == c["G"] and c["D_X"] == c["D_Y"]
    assert c["deploy"] == c["F"] + c["H"]

    # analytic extractor count: first conv + (depth-2) x (conv + BIN) + head
    w, d = 48, 8
    first = 9 * w + w
    mid = (d - 2) * (9 * w * w + 3 * w)
    head = 9 * w + 1
    assert c["H"] == first + mid + head
    assert b.extractor_overhead() == pytest.approx(c["H"] / c["F"])


def test_bundle_seeded_and_congruent():
    cfg = ModelConfig(SMALL_G, SMALL_H, SMALL_D)
    a, b, c = ModelBundle.build(cfg, 1), ModelBundle.build(cfg, 1), ModelBundle.build(cfg, 2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    for k in a.theta:
        for (n1, p1), (n2, p2) in zip(a.theta[k].state_dict().items(), a.phi[k].state_dict().items()):
            assert n1 == n2 and p1.shape == p2.shape
    a.load_state_dict(sc)
    assert all(torch.equal(a.state_dict()[k], sc[k]) for k in sc)


# ------------------------------------------------------------ tiled forward


def trained_stats(net):
    net.train()
    with torch.no_grad():
        for _ in range(3):
            net(torch.rand(4, 1, 64, 64))
    return net.eval()


def test_tiled_shared_statistics_matches_whole():
    torch.manual_seed(1)
    g = trained_stats(Generator(GeneratorConfig(base_width=4, n_residual_blocks=1, n_downsamples=1)))
    img = torch.rand(1, 1, 96, 160)
    tile = 32 * math.ceil(4 * g.rf_radius / 32)
    whole = g(img)
    tiled = tiled_forward(g, img, tile=tile)
    assert (whole - tiled).abs().max() <= 1e-5


def test_tiled_independent_tiles_differ():
    torch.manual_seed(1)
    g = trained_stats(Generator(GeneratorConfig(base_width=4, n_residual_blocks=1, n_downsamples=1)))
    img = torch.rand(1, 1, 96, 160) * torch.linspace(0.2, 1.0, 160)
    tile = 32 * math.ceil(4 * g.rf_radius / 32)
    assert (g(img) - tiled_forward(g, img, tile=tile, share_statistics=False)).abs().max() > 1e-4


def test_tiled_requires_eval_and_valid_tile():
    g = Generator(SMALL_G)
    img = torch.rand(1, 1, 128, 128)
    with pytest.raises(RuntimeError):
        tiled_forward(g.train(), img)
    g.eval()
    with pytest.raises(ShapeError):
        tiled_forward(g, img, tile=36)
    with pytest.raises(ShapeError):
        tiled_forward(g, img, tile=32)
    with pytest.raises(ShapeError):
        tiled_forward(g, torch.rand(2, 1, 64, 64))


def test_tiled_extractor():
    torch.manual_seed(2)
    h = trained_stats(Extractor(SMALL_H))
    img = torch.rand(1, 1, 80, 80)
    assert (h(img) - tiled_forward(h, img, tile=32)).abs().max() <= 1e-5
