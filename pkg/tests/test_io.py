import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from scan_xai.errors import ConfigurationError
from scan_xai.io import (
    RunManifest,
    decode_saliency,
    encode_saliency,
    file_digest,
    overlay,
    read_config,
    read_saliency,
    save_grayscale_png,
    save_image_png,
    save_overlay_png,
    write_config,
    write_saliency,
)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 40), st.integers(1, 40)),
              elements=st.floats(0, 1, width=32)))
def test_container_round_trip(arr):
    blob = encode_saliency(arr)
    assert len(blob) == 16 + 4 * arr.size
    assert np.array_equal(decode_saliency(blob), arr)


def test_container_header_layout():
    blob = encode_saliency(torch.zeros(3, 5))
    assert blob[:4] == b"SCNS"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 3
    assert int.from_bytes(blob[12:16], "little") == 5


@pytest.mark.parametrize("blob", [b"", b"XXXX" + bytes(12), encode_saliency(np.zeros((2, 2)))[:-1]])
def test_container_rejects_corrupt(blob):
    with pytest.raises(ValueError):
        decode_saliency(blob)


def test_container_file_round_trip(tmp_path):
    s = torch.rand(32, 32)
    path = write_saliency(tmp_path / "a" / "s.scn", s)
    assert np.array_equal(read_saliency(path), s.numpy())
    with pytest.raises(ValueError):
        encode_saliency(torch.rand(1, 4, 4))


def test_pngs(tmp_path):
    s = torch.linspace(0, 1, 64).view(8, 8)
    img = torch.rand(3, 8, 8)
    g = np.asarray(Image.open(save_grayscale_png(tmp_path / "g.png", s)))
    assert g.shape == (8, 8) and g[0, 0] == 0 and g[-1, -1] == 255
    rgb = np.asarray(Image.open(save_image_png(tmp_path / "i.png", img)))
    assert rgb.shape == (8, 8, 3)
    assert np.array_equal(rgb, np.round(img.numpy().transpose(1, 2, 0) * 255).astype(np.uint8))
    ov = np.asarray(Image.open(save_overlay_png(tmp_path / "o.png", img, s)))
    assert ov.shape == (8, 8, 3)


def test_overlay_weights():
    img = torch.rand(3, 4, 4)
    assert np.allclose(overlay(img, torch.rand(4, 4), weight=0.0), img.numpy().transpose(1, 2, 0))
    out = overlay(img, torch.rand(4, 4))
    assert out.min() >= 0 and out.max() <= 1


def test_manifest_round_trip(tmp_path):
    art = tmp_path / "out" / "x.bin"
    art.parent.mkdir()
    art.write_bytes(b"abc")
    m = RunManifest(command="explain", config={"alpha": 4.0}, seed=3)
    m.add_artifact(art, tmp_path / "out")
    m.finish()
    path = m.write(tmp_path / "out" / "manifest.json")
    again = RunManifest.read(path)
    assert again == m
    assert again.artifacts == {"x.bin": file_digest(art)}
    assert json.loads(path.read_text())["command"] == "explain"


def test_manifest_read_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        RunManifest.read(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text('{"a": 1}')
    with pytest.raises(ConfigurationError):
        RunManifest.read(tmp_path / "bad.json")


def test_config_round_trip(tmp_path):
    path = write_config(tmp_path / "c.ini", "train-scan", {"alpha": 4.0, "epochs": 2, "tap_layer": None})
    assert read_config(path, "train-scan") == {"alpha": "4.0", "epochs": "2", "tap_layer": ""}
    assert read_config(path, "explain") == {}
    (tmp_path / "broken.ini").write_text("no section header\n")
    with pytest.raises(ConfigurationError):
        read_config(tmp_path / "broken.ini", "x")
