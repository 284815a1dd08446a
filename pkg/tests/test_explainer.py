import pytest
import torch
import torch.nn.functional as F

from scan_xai.analysis_net import DecoderConfig, build_decoder
from scan_xai.errors import ConfigurationError, DomainError
from scan_xai.explainer import (
    coarsen,
    explain,
    explain_batch,
    percentile_sweep,
    percentile_sweep_batch,
)
from scan_xai.trainer import decoder_config_for


@pytest.fixture(scope="module")
def decoder(tiny_target):
    torch.manual_seed(0)
    return build_decoder(decoder_config_for(tiny_target, base_width=32)).eval()


@pytest.fixture(scope="module")
def images(tiny_split):
    return tiny_split.val.images[:6]


def test_explain_defaults(decoder, tiny_target, images):
    e = explain(decoder, tiny_target, images[0])
    assert e.percentile_used == 95.0
    assert e.saliency.shape == (32, 32) and e.reconstruction.shape == (3, 32, 32)
    assert e.target_class == int(tiny_target(images[:1]).argmax(1))
    assert bool(((e.saliency >= 0) & (e.saliency <= 1)).all())
    assert 0 <= e.mean <= 1


def test_explain_is_deterministic(decoder, tiny_target, images):
    a = explain(decoder, tiny_target, images[1], 0, p=80)
    b = explain(decoder, tiny_target, images[1], 0, p=80)
    assert torch.equal(a.saliency, b.saliency) and torch.equal(a.reconstruction, b.reconstruction)


def test_p_zero_uses_unmasked_features(decoder, tiny_target, images):
    e = explain(decoder, tiny_target, images[2], p=0)
    assert bool((e.mask == 1).all())
    _, feats = tiny_target.forward_with_tap(images[2])
    out = decoder(feats.unsqueeze(0))[0]
    assert torch.allclose(e.reconstruction, out[:3])


def test_batch_matches_single(decoder, tiny_target, images):
    batch = explain_batch(decoder, tiny_target, images, classes=torch.tensor([0, 1, 0, 1, 0, 1]), batch_size=4)
    for i in range(len(images)):
        one = explain(decoder, tiny_target, images[i], i % 2)
        assert torch.allclose(batch.item(i).saliency, one.saliency, atol=1e-6)
        assert batch.item(i).target_class == i % 2


def test_mask_nesting_inside_explain(decoder, tiny_target, images):
    sweep = percentile_sweep(decoder, tiny_target, images[3], None, [10, 50, 60, 90, 95])
    for lo, hi in zip(sweep, sweep[1:]):
        assert bool((hi.mask <= lo.mask).all())


def test_sweep_contract(decoder, tiny_target, images):
    assert percentile_sweep(decoder, tiny_target, images[0], 1, []) == []
    three = percentile_sweep(decoder, tiny_target, images[0], 1, [10, 60, 90])
    assert [e.percentile_used for e in three] == [10.0, 60.0, 90.0]
    twin = percentile_sweep(decoder, tiny_target, images[0], 1, [95, 95])
    assert torch.equal(twin[0].saliency, twin[1].saliency)
    with pytest.raises(DomainError):
        percentile_sweep(decoder, tiny_target, images[0], 1, [120])


def test_batched_sweep_matches_single_sweep(decoder, tiny_target, images):
    batched = percentile_sweep_batch(decoder, tiny_target, images[:2], None, [30, 95])
    for i in range(2):
        single = percentile_sweep(decoder, tiny_target, images[i], None, [30, 95])
        for e in single:
            assert torch.allclose(batched[e.percentile_used].item(i).saliency, e.saliency, atol=1e-6)


def test_coarse_saliency_has_grid_degrees_of_freedom(decoder, tiny_target, images):
    e = explain(decoder, tiny_target, images[4])
    pooled = F.adaptive_avg_pool2d(e.saliency.view(1, 1, 32, 32), 4)
    rebuilt = F.interpolate(pooled, size=(32, 32), mode="bilinear", align_corners=False)[0, 0]
    assert torch.allclose(e.coarse_saliency, rebuilt.clamp(0, 1))
    flat = torch.full((32, 32), 0.3)
    assert torch.allclose(coarsen(flat, 4), flat)


def test_saliency_bounded_for_extreme_decoder(tiny_target, images):
    dec = build_decoder(decoder_config_for(tiny_target, base_width=32)).eval()
    with torch.no_grad():
        dec.project.weight.mul_(1e4)
    e = explain_batch(dec, tiny_target, images)
    assert bool(((e.saliency >= 0) & (e.saliency <= 1)).all())
    assert bool(((e.coarse_saliency >= 0) & (e.coarse_saliency <= 1)).all())


def test_geometry_mismatch(tiny_target, images):
    wrong = build_decoder(DecoderConfig("residual", 64, 8, 32, base_width=32))
    with pytest.raises(ConfigurationError):
        explain(wrong, tiny_target, images[0])
    wrong_c = build_decoder(DecoderConfig("residual", 16, 4, 32, base_width=32))
    with pytest.raises(ConfigurationError):
        explain(wrong_c, tiny_target, images[0])


def test_explain_rejects_batches(decoder, tiny_target, images):
    with pytest.raises(DomainError):
        explain(decoder, tiny_target, images[:2])
