import pytest
import torch

from scan_xai import core_math
from scan_xai.analysis_net import DecoderConfig, build_decoder, decode, load_decoder, save_decoder
from scan_xai.errors import ConfigurationError, DomainError


def _cfg(variant="residual", c=16, sf=4, sk=32, **kw):
    return DecoderConfig(variant=variant, input_channels=c, feature_side=sf, image_side=sk, **kw)


@pytest.mark.parametrize("sf, sk, stages", [(4, 32, 3), (8, 32, 2), (14, 224, 4), (7, 224, 5)])
def test_stage_count(sf, sk, stages):
    assert _cfg(sf=sf, sk=sk).n_stages == stages
    assert len(build_decoder(_cfg(sf=sf, sk=sk, base_width=8, min_width=8)).stages) == stages


def test_transformer_variant_layout():
    dec = build_decoder(_cfg("transformer", c=32, sf=8, sk=32))
    assert len(dec.mixer.blocks.layers) == 4
    assert len(dec.stages) == 2
    assert dec.parameter_count() == sum(p.numel() for p in dec.parameters())


@pytest.mark.parametrize("sf, sk", [(3, 32), (6, 20), (32, 32), (0, 32), (4, 24)])
def test_bad_ratio(sf, sk):
    with pytest.raises(ConfigurationError):
        _cfg(sf=sf, sk=sk)


def test_widths_halve_with_floor():
    assert _cfg(base_width=128, sf=2, sk=64).widths() == [128, 64, 32, 32, 32, 32]


@pytest.mark.parametrize("variant", ["residual", "transformer"])
def test_decode_shapes_and_determinism(variant):
    torch.manual_seed(0)
    dec = build_decoder(_cfg(variant)).eval()
    x = torch.randn(16, 4, 4)
    out = decode(dec, x)
    assert out.shape == (4, 32, 32)
    assert torch.equal(out, decode(dec, x))
    assert decode(dec, torch.randn(3, 16, 4, 4)).shape == (3, 4, 32, 32)
    assert bool(torch.isfinite(decode(dec, torch.zeros(16, 4, 4))).all())


def test_decode_shape_mismatch():
    dec = build_decoder(_cfg())
    with pytest.raises(DomainError):
        decode(dec, torch.randn(8, 4, 4))
    with pytest.raises(DomainError):
        decode(dec, torch.randn(16, 8, 8))


@pytest.mark.parametrize("variant", ["residual", "transformer"])
def test_every_parameter_receives_gradient(variant):
    torch.manual_seed(1)
    dec = build_decoder(_cfg(variant, base_width=32))
    x = torch.randn(4, 16, 4, 4)
    target = torch.rand(4, 3, 32, 32)
    core_math.total_loss(dec(x), target, 4.0).total.backward()
    for name, p in dec.named_parameters():
        assert p.grad is not None and float(p.grad.norm()) > 0, name


def test_overfits_a_single_pair():
    torch.manual_seed(2)
    dec = build_decoder(_cfg(base_width=32))
    x = torch.randn(1, 16, 4, 4)
    target = core_math.blur_target(torch.rand(1, 3, 32, 32), 4)
    opt = torch.optim.Adam(dec.parameters(), lr=1e-3)
    first = None
    for _ in range(200):
        loss = core_math.total_loss(dec(x), target, 4.0).total
        first = float(loss.detach()) if first is None else first
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert float(core_math.total_loss(dec(x), target, 4.0).total) <= 0.5 * first


def test_checkpoint_round_trip(tmp_path):
    dec = build_decoder(_cfg("transformer", c=32, sf=8)).eval()
    path = save_decoder(dec, tmp_path / "d.pt", seed=4)
    loaded, archive = load_decoder(path)
    assert archive["seed"] == 4 and archive["arch"] == "transformer"
    x = torch.randn(32, 8, 8)
    assert torch.equal(decode(loaded, x), decode(dec, x))


def test_load_rejects_other_archives(tmp_path):
    torch.save({"kind": "scan_xai.target"}, tmp_path / "t.pt")
    with pytest.raises(ConfigurationError):
        load_decoder(tmp_path / "t.pt")
