import pytest
import torch

from rgdeblur.deblur import (
    BACKBONES,
    BlurMapEstimator,
    DeblurModel,
    DeformableFusion,
    IdentityBackbone,
    UNet,
    build_backbone,
    deblur_forward,
    estimate_blur_map,
    fuse,
)
from rgdeblur.imagecore import ShapeError


def randomize(fusion: DeformableFusion, offset_scale=0.7):
    with torch.no_grad():
        fusion.out.normal_()
        fusion.offset_weight.normal_(std=offset_scale)
        fusion.offset_bias.uniform_(-offset_scale, offset_scale)
    return fusion


def test_estimator_shape_and_nonnegative():
    est = BlurMapEstimator(m=8, width=8, blocks=3)
    out = estimate_blur_map(est, torch.rand(2, 3, 13, 11))
    assert out.shape == (2, 35, 13, 11)
    assert (out >= 0).all()
    with pytest.raises(ShapeError):
        estimate_blur_map(est, torch.rand(1, 4, 8, 8))


def test_estimator_deterministic():
    x = torch.rand(1, 3, 8, 8)
    outs = []
    for _ in range(2):
        torch.manual_seed(2)
        outs.append(BlurMapEstimator(m=4, width=8)(x))
    assert torch.equal(*outs)


def test_fusion_defaults():
    f = DeformableFusion()
    assert (f.heads, f.points, f.channels) == (5, 4, 35)
    assert f.offsets(torch.rand(1, 3, 4, 4)).abs().max().item() == 0.0


def test_fusion_identity_when_output_projection_zero():
    f = DeformableFusion(channels=9, heads=3, points=2)
    with torch.no_grad():
        f.offset_weight.normal_()
    for _ in range(5):
        x = torch.rand(2, 3, 7, 6)
        assert torch.equal(fuse(f, x, torch.randn(2, 9, 7, 6) * 10), x)


def test_fusion_head_permutation_invariance():
    f = randomize(DeformableFusion(channels=5, heads=3, points=2))
    x, b = torch.rand(1, 3, 6, 6, dtype=torch.float64), torch.rand(1, 5, 6, 6, dtype=torch.float64)
    f = f.double()
    ref = fuse(f, x, b)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        for p in f.parameters():
            p.copy_(p[perm])
    assert torch.allclose(fuse(f, x, b), ref, atol=1e-12)


def test_fusion_gradcheck_all_parameters():
    torch.manual_seed(3)
    f = randomize(DeformableFusion(channels=5, heads=2, points=2)).double()
    x = torch.rand(1, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    b = torch.rand(1, 5, 6, 6, dtype=torch.float64, requires_grad=True)
    names = [n for n, _ in f.named_parameters()]
    params = [p.detach().clone().requires_grad_() for p in f.parameters()]

    def fn(xx, bb, *ps):
        return torch.func.functional_call(f, dict(zip(names, ps)), (xx, bb))

    assert torch.autograd.gradcheck(fn, (x, b, *params), rtol=1e-3, atol=1e-6)


def test_fusion_shape_errors():
    f = DeformableFusion(channels=5, heads=1, points=1)
    with pytest.raises(ShapeError):
        fuse(f, torch.rand(1, 3, 4, 4), torch.rand(1, 6, 4, 4))
    with pytest.raises(ShapeError):
        fuse(f, torch.rand(1, 3, 4, 4), torch.rand(1, 5, 4, 5))


def test_unet_shape_identity_start_and_budget():
    net = UNet()
    x = torch.rand(1, 3, 64, 64)
    assert net(x).shape == x.shape
    assert torch.equal(net(x), x)
    assert sum(p.numel() for p in net.parameters()) < 2_000_000
    odd = torch.rand(1, 3, 37, 50)
    assert net(odd).shape == odd.shape


def test_backbone_registry():
    assert {"unet", "identity"} <= set(BACKBONES)
    assert isinstance(build_backbone("unet", widths=(8, 16)), UNet)
    with pytest.raises(KeyError):
        build_backbone("restormer")


def test_deblur_forward_identity_composition():
    est = BlurMapEstimator(m=4, width=8, blocks=1)
    fusion = DeformableFusion(channels=9, heads=2, points=2)
    x = torch.rand(1, 3, 10, 10)
    out, bmap = deblur_forward(IdentityBackbone(), est, fusion, x)
    assert torch.equal(out, x)
    assert bmap.shape == (1, 9, 10, 10)
    out, bmap = DeblurModel(UNet(widths=(8, 16)))(x)
    assert out.shape == x.shape and bmap is None


def test_gradient_reaches_estimator_once_output_projection_nonzero():
    est = BlurMapEstimator(m=4, width=8, blocks=1)
    fusion = randomize(DeformableFusion(channels=9, heads=2, points=2))
    out, _ = deblur_forward(IdentityBackbone(), est, fusion, torch.rand(1, 3, 10, 10))
    out.square().mean().backward()
    total = sum(p.grad.abs().sum().item() for p in est.parameters())
    assert total > 0
