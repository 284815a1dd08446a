import pytest
import torch

from scan_xai.errors import ConfigurationError
from scan_xai.feature_tap import TargetModel, accuracy, state_hash, train_toy_targets
from scan_xai.data import make_shapes
from scan_xai.toy_models import build_toy, reinitialize


def test_cnn_final_conv_geometry(untrained_cnn):
    x = torch.rand(2, 3, 32, 32)
    logits, feats = untrained_cnn.forward_with_tap(x)
    assert logits.shape == (2, 3)
    assert feats.shape == (2, 64, 4, 4)
    assert untrained_cnn.with_tap("final_conv").feature_side() == 4
    _, f1 = untrained_cnn.forward_with_tap(x[0], "conv_stage_1")
    assert f1.shape == (32, 16, 16)


def test_vit_token_grid(untrained_vit):
    target = untrained_vit.with_tap("attn_3")
    captured = {}

    def hook(module, inputs, output):
        captured["tokens"] = output.shape

    handle = target.net.attn_3.register_forward_hook(hook)
    _, feats = target.forward_with_tap(torch.rand(1, 3, 32, 32))
    handle.remove()
    assert captured["tokens"][1] == 65
    assert feats.shape == (1, 32, 8, 8)
    assert target.feature_side() == 8


def test_unknown_tap_layer(untrained_cnn):
    with pytest.raises(ConfigurationError):
        untrained_cnn.with_tap("conv_stage_9")
    with pytest.raises(ConfigurationError):
        TargetModel(build_toy("cnn"), 32, tap_layer="nope")


def test_tapping_is_non_invasive_and_deterministic(untrained_cnn, untrained_vit):
    x = torch.rand(3, 3, 32, 32)
    for target in (untrained_cnn, untrained_vit):
        plain = target(x)
        tapped, f1 = target.forward_with_tap(x)
        _, f2 = target.forward_with_tap(x)
        g_logits, _, _ = target.gradient_map(x, 0)
        assert torch.equal(plain, tapped)
        assert torch.allclose(plain, g_logits, rtol=1e-5, atol=1e-6)
        assert torch.equal(f1, f2)


def test_gradient_map_shapes_and_finiteness(untrained_cnn, untrained_vit):
    x = torch.rand(2, 3, 32, 32)
    for target in (untrained_cnn, untrained_vit):
        _, f, g = target.gradient_map(x, torch.tensor([0, 2]))
        assert f.shape == g.shape
        assert bool(torch.isfinite(g).all())


def test_gradient_map_rejects_bad_class(untrained_cnn):
    with pytest.raises(ConfigurationError):
        untrained_cnn.gradient_map(torch.rand(1, 3, 32, 32), 7)


def test_gradient_differs_between_classes(tiny_target):
    x = make_shapes(1, seed=11).images
    _, _, g0 = tiny_target.gradient_map(x, 0)
    _, _, g1 = tiny_target.gradient_map(x, 1)
    assert not torch.equal(g0, g1)


@pytest.mark.parametrize("arch", ["cnn", "vit"])
def test_gradient_matches_directional_finite_difference(arch, untrained_cnn, untrained_vit):
    target = untrained_cnn if arch == "cnn" else untrained_vit
    target.net.double()
    gen = torch.Generator().manual_seed(5)
    x = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    _, f, g = target.gradient_map(x, 1)
    for _ in range(3):
        d = torch.randn(f.shape, generator=gen, dtype=torch.float64)
        d /= d.norm()
        h = 1e-4
        plus = target.logits_from_features(x, f + h * d)[0, 1]
        minus = target.logits_from_features(x, f - h * d)[0, 1]
        fd = float((plus - minus) / (2 * h))
        an = float((g * d).sum())
        assert abs(fd - an) <= 1e-3 * max(abs(an), 1e-8)


def test_frozen_and_hash_stable(untrained_cnn):
    assert untrained_cnn.frozen
    h = untrained_cnn.hash()
    untrained_cnn.gradient_map(torch.rand(2, 3, 32, 32), 1)
    assert untrained_cnn.hash() == h


def test_checkpoint_round_trip(tmp_path, untrained_vit):
    path = untrained_vit.with_tap("attn_2").save(tmp_path / "t.pt")
    loaded = TargetModel.load(path)
    assert loaded.tap_layer == "attn_2"
    assert loaded.hash() == untrained_vit.hash()
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(loaded(x), untrained_vit(x))


def test_load_rejects_foreign_archive(tmp_path):
    torch.save({"kind": "other"}, tmp_path / "x.pt")
    with pytest.raises(ConfigurationError):
        TargetModel.load(tmp_path / "x.pt")


def test_training_reaches_high_accuracy_and_is_reproducible(tiny_split, tiny_target):
    assert tiny_target.frozen
    assert tiny_target.seed == 0
    assert accuracy(tiny_target, tiny_split.val) > 0.9
    again = train_toy_targets(tiny_split.train, tiny_split.val, arch="cnn", epochs=2, seed=0)
    assert again.hash() == tiny_target.hash()


def test_training_needs_two_classes(tiny_split):
    one = tiny_split.train.with_labels(torch.zeros(len(tiny_split.train), dtype=torch.long))
    with pytest.raises(ValueError):
        train_toy_targets(one, epochs=1)


def test_reinitialize_changes_weights():
    net = build_toy("cnn")
    before = state_hash(net)
    torch.manual_seed(1)
    reinitialize(net)
    assert state_hash(net) != before
