import pickle

import numpy as np
import pytest
import torch
from PIL import Image

from scan_xai.data import ImageDataset, load_dataset, load_image, make_shapes, shapes_split


def _write_cifar(root, n_per_batch=6):
    rng = np.random.default_rng(0)
    for name in ["data_batch_1", "data_batch_2", "test_batch"]:
        batch = {b"data": rng.integers(0, 256, (n_per_batch, 3072), dtype=np.uint8),
                 b"labels": list(rng.integers(0, 10, n_per_batch))}
        with open(root / name, "wb") as fh:
            pickle.dump(batch, fh)
    with open(root / "batches.meta", "wb") as fh:
        pickle.dump({b"label_names": [f"c{i}".encode() for i in range(10)]}, fh)


def test_cifar_archive(tmp_path):
    _write_cifar(tmp_path)
    split = load_dataset(str(tmp_path), n_train=10, n_val=4)
    assert split.train.images.shape == (10, 3, 32, 32)
    assert split.val.images.shape == (4, 3, 32, 32)
    assert split.train.class_names[3] == "c3"
    assert float(split.train.images.max()) <= 1.0


def test_image_folder(tmp_path):
    rng = np.random.default_rng(1)
    for cls in ("cat", "dog"):
        (tmp_path / cls).mkdir()
        for i in range(5):
            Image.fromarray(rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)).save(tmp_path / cls / f"{i}.png")
    split = load_dataset(str(tmp_path), side=16)
    assert len(split.train) + len(split.val) == 10
    assert split.train.class_names == ["cat", "dog"]
    assert split.train.images.shape[1:] == (3, 16, 16)
    assert load_image(tmp_path / "cat" / "0.png").shape == (3, 20, 24)


def test_missing_dataset_path():
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/data")


def test_shapes_properties():
    ds = make_shapes(64, seed=2)
    assert ds.images.shape == (64, 3, 32, 32)
    assert float(ds.images.min()) >= 0 and float(ds.images.max()) <= 1
    assert set(ds.labels.tolist()) == {0, 1}
    assert torch.equal(make_shapes(64, seed=2).images, ds.images)
    assert not torch.equal(make_shapes(64, seed=3).images, ds.images)
    assert make_shapes(8, side=64, n_classes=4).images.shape == (8, 3, 64, 64)


def test_shapes_split_disjoint_seeds():
    split = shapes_split(20, 10, seed=0)
    assert len(split.train) == 20 and len(split.val) == 10
    assert not torch.equal(split.train.images[:10], split.val.images)


def test_dataset_validation():
    with pytest.raises(ValueError):
        ImageDataset(torch.zeros(2, 1, 4, 4), torch.zeros(2, dtype=torch.long))
    with pytest.raises(ValueError):
        ImageDataset(torch.zeros(2, 3, 4, 4), torch.zeros(3, dtype=torch.long))
