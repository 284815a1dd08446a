"""Dataset ingestion: synthetic shapes, CIFAR-10 archives, class-folder trees.

All loaders return an :class:`ImageDataset` holding float32 images in [0, 1]
with shape ``[N, 3, S, S]`` and integer labels.
"""
from __future__ import annotations

import logging
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("circle", "square", "triangle", "cross")
# per-class object hue used when colour is coupled to the label
CLASS_PALETTE = np.array([[0.9, 0.15, 0.1], [0.1, 0.3, 0.95], [0.1, 0.85, 0.2], [0.95, 0.85, 0.1]])
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass
class ImageDataset:
    images: torch.Tensor
    labels: torch.Tensor
    class_names: list[str] = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [N, 3, S, S], got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if not self.class_names:
            self.class_names = [str(i) for i in range(int(self.labels.max()) + 1)] if len(self.labels) else []

    def __len__(self):
        return len(self.labels)

    @property
    def image_side(self) -> int:
        return int(self.images.shape[-1])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "ImageDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageDataset(self.images[index], self.labels[index], list(self.class_names), self.name)

    def head(self, n: int) -> "ImageDataset":
        return self.subset(torch.arange(min(n, len(self))))

    def with_labels(self, labels: torch.Tensor) -> "ImageDataset":
        return ImageDataset(self.images, labels.clone(), list(self.class_names), self.name)

    def batches(self, batch_size: int, shuffle: bool = False, generator: torch.Generator | None = None):
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


@dataclass
class DatasetSplit:
    train: ImageDataset
    val: ImageDataset


def cache_dir() -> Path:
    root = os.environ.get("SCAN_CACHE_DIR") or Path.home() / ".cache" / "scan_xai"
    return Path(root)


# -- synthetic shapes ---------------------------------------------------------

def _smooth_background(rng: np.random.Generator, side: int) -> np.ndarray:
    """Low-frequency colour field: random bilinear blend of four corner colours plus mild noise."""
    corners = rng.uniform(0.15, 0.85, size=(4, 3))
    t = np.linspace(0.0, 1.0, side)
    u, v = np.meshgrid(t, t, indexing="xy")
    w = np.stack([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v], axis=-1)
    bg = w @ corners
    bg += rng.normal(0.0, 0.04, size=bg.shape)
    return bg


def _shape_mask(kind: str, side: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    ry, rx = c * dy - s * dx, s * dy + c * dx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        h = r * 0.85
        return (np.abs(ry) <= h) & (np.abs(rx) <= h)
    if kind == "triangle":
        # upright equilateral-ish triangle in the rotated frame
        return (ry <= r * 0.6) & (ry >= -r) & (np.abs(rx) <= (ry + r) * 0.62)
    if kind == "cross":
        arm = r * 0.32
        return ((np.abs(ry) <= arm) & (np.abs(rx) <= r)) | ((np.abs(rx) <= arm) & (np.abs(ry) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def _distractor_mask(rng: np.random.Generator, side: int, obj: np.ndarray) -> np.ndarray:
    """A short axis-aligned bar that does not touch the object (best effort)."""
    length, width = max(3, side * 3 // 8), max(2, side // 12)
    grown = obj.copy()
    grown[1:] |= obj[:-1]
    grown[:-1] |= obj[1:]
    grown[:, 1:] |= obj[:, :-1]
    grown[:, :-1] |= obj[:, 1:]
    bar = np.zeros_like(obj)
    for _ in range(50):
        h, w = (width, length) if rng.random() < 0.5 else (length, width)
        y, x = rng.integers(0, side - h + 1), rng.integers(0, side - w + 1)
        bar[:] = False
        bar[y:y + h, x:x + w] = True
        if not (bar & grown).any():
            break
    return bar & ~obj


def make_shapes(n: int, side: int = 32, n_classes: int = 2, seed: int = 0,
                max_rotation: float = 0.0, color_coupling: float = 0.6,
                distractor: bool = True) -> ImageDataset:
    """Generate ``n`` images of one filled shape on a smooth random background.

    Class is the shape kind; position, size and rotation are nuisance factors,
    and the object colour is kept well separated from the background.
    ``color_coupling`` in [0, 1] blends the object colour towards a per-class
    palette entry, so that object appearance (not only outline) carries class
    evidence. ``max_rotation`` (radians) adds rotation jitter; it makes the
    task much slower to learn for the toy CNN, so it is off by default.
    ``distractor`` adds a grey bar away from the object: visible, but carrying
    no class evidence.
    """
    if not 2 <= n_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"n_classes must be in [2, {len(SHAPE_CLASSES)}]")
    if not 0.0 <= color_coupling <= 1.0:
        raise ValueError(f"color_coupling must be in [0, 1], got {color_coupling}")
    rng = np.random.default_rng(seed)
    images = np.empty((n, side, side, 3), dtype=np.float32)
    labels = rng.integers(0, n_classes, size=n)
    for i in range(n):
        bg = _smooth_background(rng, side)
        r = rng.uniform(0.17, 0.28) * side
        cy, cx = rng.uniform(r + 1, side - r - 1, size=2)
        mask = _shape_mask(SHAPE_CLASSES[labels[i]], side, cy, cx, r, rng.uniform(-max_rotation, max_rotation))
        bg_mean = bg[mask].mean(axis=0) if mask.any() else bg.mean(axis=(0, 1))
        for _ in range(50):
            color = rng.uniform(0.0, 1.0, size=3)
            color = (1 - color_coupling) * color + color_coupling * CLASS_PALETTE[labels[i]]
            if np.abs(color - bg_mean).max() > 0.45:
                break
        img = bg.copy()
        if distractor:
            bar = _distractor_mask(rng, side, mask)
            img[bar] = rng.choice([0.05, 0.95]) + rng.normal(0.0, 0.03, size=(int(bar.sum()), 1))
        img[mask] = color + rng.normal(0.0, 0.03, size=(int(mask.sum()), 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(
        torch.from_numpy(images).permute(0, 3, 1, 2).contiguous(),
        torch.from_numpy(labels.astype(np.int64)),
        list(SHAPE_CLASSES[:n_classes]),
        name="shapes",
    )


def shapes_split(
    n_train: int = 4000, n_val: int = 500, side: int = 32, n_classes: int = 2, seed: int = 0,
    **shape_kw,
) -> DatasetSplit:
    """Train / validation shapes sets drawn from disjoint seeds."""
    return DatasetSplit(
        train=make_shapes(n_train, side, n_classes, seed=2 * seed, **shape_kw),
        val=make_shapes(n_val, side, n_classes, seed=2 * seed + 1, **shape_kw),
    )


# -- CIFAR-10 python archives -------------------------------------------------

def _read_cifar_batch(path: Path):
    with open(path, "rb") as fh:
        d = pickle.load(fh, encoding="bytes")
    data = d[b"data"] if b"data" in d else d["data"]
    labels = d.get(b"labels", d.get("labels"))
    x = np.asarray(data, dtype=np.uint8).reshape(-1, 3, 32, 32)
    return x, np.asarray(labels, dtype=np.int64)


def load_cifar10(root: str | Path, n_train: int | None = None, n_val: int | None = None) -> DatasetSplit:
    """Load the python-format CIFAR-10 archive (``data_batch_*`` and ``test_batch``)."""
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    train_files = sorted(root.glob("data_batch_*"))
    test_file = root / "test_batch"
    if not train_files or not test_file.exists():
        raise FileNotFoundError(f"no CIFAR-10 batches under {root}")
    xs, ys = zip(*(_read_cifar_batch(p) for p in train_files))
    xtr, ytr = np.concatenate(xs), np.concatenate(ys)
    xte, yte = _read_cifar_batch(test_file)
    names = [str(i) for i in range(10)]
    meta = root / "batches.meta"
    if meta.exists():
        with open(meta, "rb") as fh:
            m = pickle.load(fh, encoding="bytes")
        raw = m.get(b"label_names", m.get("label_names"))
        if raw:
            names = [x.decode() if isinstance(x, bytes) else str(x) for x in raw]
    xtr, ytr = xtr[:n_train], ytr[:n_train]
    xte, yte = xte[:n_val], yte[:n_val]

    def to_ds(x, y):
        return ImageDataset(torch.from_numpy(x).float() / 255.0, torch.from_numpy(y), names, name="cifar10")

    return DatasetSplit(train=to_ds(xtr, ytr), val=to_ds(xte, yte))


# -- class-per-directory trees ------------------------------------------------

def load_image(path: str | Path, side: int | None = None) -> torch.Tensor:
    """Read an image file as a ``[3, S, S]`` float tensor in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def list_images(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_folder(root: str | Path, side: int, val_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """ImageNet-style layout: one sub-directory per class."""
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if len(classes) < 2:
        raise FileNotFoundError(f"need at least two class directories under {root}")
    imgs, labels = [], []
    for ci, cname in enumerate(classes):
        for p in list_images(root / cname):
            imgs.append(load_image(p, side))
            labels.append(ci)
    ds = ImageDataset(torch.stack(imgs), torch.tensor(labels), classes, name=root.name)
    perm = torch.randperm(len(ds), generator=torch.Generator().manual_seed(seed))
    n_val = max(1, int(round(val_fraction * len(ds))))
    return DatasetSplit(train=ds.subset(perm[n_val:]), val=ds.subset(perm[:n_val]))


def load_dataset(spec: str, *, side: int = 32, n_train: int | None = None, n_val: int | None = None,
                 n_classes: int = 2, seed: int = 0) -> DatasetSplit:
    """Resolve a dataset argument: ``shapes``, a CIFAR-10 archive directory, or a class-folder tree."""
    if spec == "shapes":
        return shapes_split(n_train or 4000, n_val or 500, side, n_classes, seed)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"dataset path {spec!r} does not exist")
    if list(path.glob("data_batch_*")) or (path / "cifar-10-batches-py").is_dir():
        return load_cifar10(path, n_train, n_val)
    split = load_image_folder(path, side, seed=seed)
    if n_train:
        split.train = split.train.head(n_train)
    if n_val:
        split.val = split.val.head(n_val)
    return split
