import pytest
import torch

from mri2pet.backbone import (ConditionalUNet, DualArmModel, FeaturePyramid, UNetConfig, count_parameters,
                              desk_config, full_scale_config, swap_arms)
from mri2pet.conditioning import ConditionBundle


def _perturb(module, scale=0.05, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g))


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(channel_multipliers=(1, 2), levels=3)
    with pytest.raises(ValueError):
        UNetConfig(attention_factors=(8,))
    with pytest.raises(ValueError):
        UNetConfig(in_channels=5, out_channels=3)
    assert desk_config().emb_dim == 64


def test_unet_shapes_and_pyramid():
    net = ConditionalUNet(desk_config(base_channels=8))
    x = torch.randn(2, 5, 32, 32)
    out, feats = net(x, ConditionBundle(t=torch.tensor([3, 900])))
    assert out.shape == x.shape
    assert len(feats) == net.num_res_blocks_total == 2 * 3 + 2 + 3 * 3
    pyr = FeaturePyramid.from_maps(feats, (32, 32))
    assert len(pyr) == len(feats) and set(pyr.scales) == {1, 2, 4}


def test_odd_sizes_round_trip():
    net = ConditionalUNet(desk_config(base_channels=8))
    out, _ = net(torch.randn(1, 5, 24, 28))
    assert out.shape == (1, 5, 24, 28)


def test_zero_initialized_output_and_heads():
    net = ConditionalUNet(desk_config(base_channels=8))
    x = torch.randn(1, 5, 16, 16)
    out, feats_a = net(x, ConditionBundle(clinical=torch.randn(1, 9)))
    _, feats_b = net(x, ConditionBundle(clinical=torch.randn(1, 9)))
    assert torch.count_nonzero(out) == 0
    # zero clinical heads leave c_s = 1 at initialization
    assert all(torch.allclose(a, b) for a, b in zip(feats_a, feats_b))


def test_conditions_change_output_once_trained():
    net = ConditionalUNet(desk_config(base_channels=8))
    _perturb(net)
    x = torch.randn(1, 5, 16, 16)
    base, _ = net(x, ConditionBundle(t=torch.tensor([10])))
    other_t, _ = net(x, ConditionBundle(t=torch.tensor([700])))
    with_c, _ = net(x, ConditionBundle(t=torch.tensor([10]), clinical=torch.randn(1, 9)))
    assert not torch.allclose(base, other_t)
    assert not torch.allclose(base, with_c)


def test_pyramid_length_checked():
    net = ConditionalUNet(desk_config(base_channels=8))
    with pytest.raises(ValueError):
        net(torch.randn(1, 5, 16, 16), ConditionBundle(h_m=[torch.ones(1)]))
    with pytest.raises(ValueError):
        net(torch.randn(1, 3, 16, 16))


def test_slice_aware_blocks():
    net = ConditionalUNet(desk_config(base_channels=8, slice_aware=True))
    _perturb(net)
    x = torch.randn(2, 5, 16, 16)
    a, _ = net(x, ConditionBundle(z=torch.tensor([0.0, 0.0])))
    b, _ = net(x, ConditionBundle(z=torch.tensor([1.0, 1.0])))
    assert not torch.allclose(a, b)


def test_dual_arm_routes_features():
    model = DualArmModel(desk_config(base_channels=8))
    _perturb(model)
    src = torch.randn(2, 5, 16, 16)
    xt = torch.randn(2, 5, 16, 16)
    t = torch.tensor([5, 500])
    task, pred = model(src, xt, t)
    assert task.shape == pred.shape == src.shape
    _, pred2 = model(src + 1.0, xt, t)
    assert not torch.allclose(pred, pred2)
    fn = model.denoise_fn(src)
    assert torch.allclose(fn(xt, t), pred)


def test_condition_routing():
    clinical = torch.randn(1, 9)
    src, xt, t = torch.randn(1, 5, 16, 16), torch.randn(1, 5, 16, 16), torch.tensor([3])
    for target, cond_changes, den_changes in (("denoiser", False, True), ("conditioner", True, False),
                                              ("both", True, True)):
        model = DualArmModel(desk_config(base_channels=8), condition_on=target)
        _perturb(model)
        ta, pa = model(src, xt, t, clinical)
        tb, pb = model(src, xt, t, -clinical)
        assert (not torch.allclose(ta, tb)) == cond_changes
        assert not torch.allclose(pa, pb)  # the denoiser sees either the clinical data or altered features
    with pytest.raises(ValueError):
        DualArmModel(desk_config(), condition_on="nowhere")


def test_swap_arms_shares_weights():
    model = DualArmModel(desk_config(base_channels=8))
    swapped = swap_arms(model)
    assert swapped.mode == "P2M"
    assert swapped.conditioner is model.denoiser and swapped.denoiser is model.conditioner
    assert count_parameters(swapped) == count_parameters(model)
    assert swap_arms(swapped).conditioner is model.conditioner


def test_full_scale_config_geometry():
    cfg = full_scale_config()
    assert cfg.base_channels == 64 and cfg.in_channels == 15 and cfg.levels == 5
    net = ConditionalUNet(cfg)
    assert 2**(cfg.levels - 1) == 16 and 96 // 16 == 6 and 112 // 16 == 7
    assert count_parameters(net) * 2 == pytest.approx(89e6, rel=0.15)
