import pytest
import torch

import gradcheck
from priorsr.attention import ShapeMismatch
from priorsr.core import RunConfig
from priorsr.networks import (BASE_MODULES, CONTROL_MODULES, Autoencoder, Restorer, TimestepOutOfRange,
                              control_forward, encode_latent, unet_forward)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return Restorer(RunConfig()).eval()


def _inputs(cfg, batch=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    lat = cfg.latent_size
    return dict(
        lr_up=torch.rand(batch, 3, cfg.hr_size, cfg.hr_size, generator=g, dtype=dtype) * 2 - 1,
        z_t=torch.randn(batch, cfg.latent_channels, lat, lat, generator=g, dtype=dtype),
        t=torch.randint(1, cfg.num_timesteps + 1, (batch,), generator=g),
        c_h=torch.randn(batch, cfg.context_len, cfg.text_dim, generator=g, dtype=dtype),
        c_l=torch.randn(batch, cfg.context_len, cfg.text_dim, generator=g, dtype=dtype),
    )


def test_encode_latent_shapes():
    ae = Autoencoder(4, 8, (8, 8, 8))
    assert encode_latent(torch.zeros(1, 3, 128, 128), ae).shape == (1, 4, 16, 16)
    with torch.no_grad():
        assert encode_latent(torch.zeros(1, 3, 512, 512), ae).shape == (1, 4, 64, 64)


def test_control_head_shapes(model):
    out = control_forward(model, **_inputs(model.cfg))
    assert [tuple(x.shape[1:]) for x in out.pixel_heads] == [(3, 64, 64), (3, 32, 32), (3, 16, 16)]
    assert [tuple(x.shape[1:]) for x in out.latent_heads] == [(4, 8, 8), (4, 4, 4), (4, 2, 2)]
    assert len(out.pixel_heads) == 3 and len(out.latent_heads) == 3


def test_fresh_residual_taps_are_zero(model):
    out = control_forward(model, **_inputs(model.cfg))
    assert all(torch.count_nonzero(r) == 0 for r in out.residuals)


def test_zero_init_identity(model):
    with torch.no_grad():
        for seed in range(3):
            x = _inputs(model.cfg, seed=seed)
            ctrl = control_forward(model, **x)
            plain = unet_forward(model, x["z_t"], x["t"], x["c_h"])
            assert torch.equal(plain, unet_forward(model, x["z_t"], x["t"], x["c_h"], ctrl))


@pytest.mark.parametrize("lat", [8, 16, 32])
def test_unet_output_shape(model, lat):
    z = torch.randn(1, 4, lat, lat)
    with torch.no_grad():
        assert model.unet(z, torch.tensor([10]), torch.randn(1, 77, 64)).shape == z.shape


def test_timestep_and_shape_errors(model):
    x = _inputs(model.cfg, batch=1)
    with pytest.raises(TimestepOutOfRange):
        model.unet(x["z_t"], torch.tensor([0]), x["c_h"])
    with pytest.raises(TimestepOutOfRange):
        model.unet(x["z_t"], torch.tensor([1001]), x["c_h"])
    with pytest.raises(ShapeMismatch):
        control_forward(model, x["lr_up"][..., :64, :64], x["z_t"], x["t"], x["c_h"], x["c_l"])


def test_parameter_partition_is_exact(model):
    owners = {}
    for name, module in model.module_dict().items():
        for pname, p in module.named_parameters():
            assert id(p) not in owners, (pname, owners.get(id(p)))
            owners[id(p)] = name
    all_ids = {id(p) for p in model.parameters()}
    assert all_ids == set(owners)
    assert set(BASE_MODULES) | set(CONTROL_MODULES) == set(model.module_dict())
    assert not set(BASE_MODULES) & set(CONTROL_MODULES)


def test_unet_gradients_finite_differences():
    cfg = RunConfig(hr_size=64, unet_channels=(16, 16, 16), image_encoder_channels=(8, 8, 8), text_dim=16,
                    ae_channels=(8, 8, 8))
    torch.manual_seed(0)
    model = Restorer(cfg).double()
    with torch.no_grad():
        for zc in model.control.zero_convs:
            zc.weight.normal_(std=0.1)
        for ca in model.cond_attn:
            ca.to_out.weight.normal_(std=0.1)
    x = _inputs(cfg, batch=1, dtype=torch.float64)
    c_h = torch.randn(1, 77, 16, dtype=torch.float64)
    c_l = torch.randn(1, 77, 16, dtype=torch.float64)
    params = [(f"unet.{n}", p) for n, p in model.unet.named_parameters()]
    picks = gradcheck.sample_entries(params, 10, torch.Generator().manual_seed(4))

    def fn():
        ctrl = control_forward(model, x["lr_up"], x["z_t"], x["t"], c_h, c_l)
        return unet_forward(model, x["z_t"], x["t"], c_h, ctrl).pow(2).mean()

    gradcheck.check(fn, picks)


def test_fusion_mode_switch(model):
    ctrl = model.control
    assert ctrl.fusion_mode == "parallel"
    ctrl.set_fusion_mode("serial")
    assert all(lvl.attn.mode == "serial" for lvl in ctrl.levels)
    ctrl.set_fusion_mode("parallel")


def test_control_clone_copies_unet_encoder():
    torch.manual_seed(0)
    model = Restorer(RunConfig(hr_size=64))
    model.control.init_from_unet(model.unet)
    assert torch.equal(model.control.levels[1].res.conv1.weight, model.unet.levels[1].res.conv1.weight)
    assert torch.equal(model.control.mid.attn.ca_high.to_q.weight, model.unet.mid.attn.to_q.weight)
    assert model.control.levels[0].res.conv1.weight is not model.unet.levels[0].res.conv1.weight
