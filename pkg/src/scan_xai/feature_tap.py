"""Intermediate-feature and class-gradient access for a frozen target classifier."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageDataset
from .errors import ConfigurationError, TrainingError
from .toy_models import ToyViT, build_toy

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "scan_xai.target"


@dataclass
class FeatureMap:
    values: torch.Tensor  # [C, s, s] or [B, C, s, s]
    layer_id: str
    spatial_side: int


@dataclass
class GradientMap:
    values: torch.Tensor
    target_class: torch.Tensor | int


def state_hash(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TargetModel:
    """A classifier plus the name of the layer SCAN reads from.

    The wrapped network is kept in eval mode with gradients disabled on its
    parameters; tapping never changes the logits.
    """

    def __init__(self, net: nn.Module, image_side: int, tap_layer: str | None = None,
                 seed: int | None = None, train_info: dict | None = None):
        self.net = net
        self.image_side = int(image_side)
        self.seed = seed
        self.train_info = dict(train_info or {})
        self.tap_layer = tap_layer or default_tap_layer(net)
        self._resolve(self.tap_layer)
        self.freeze()

    @property
    def architecture(self) -> str:
        return self.net.arch

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    @property
    def frozen(self) -> bool:
        return not self.net.training and not any(p.requires_grad for p in self.net.parameters())

    def freeze(self) -> "TargetModel":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        return self

    def layers(self) -> tuple[str, ...]:
        return tuple(self.net.stage_names) + tuple(self.net.aliases)

    def _resolve(self, layer: str) -> nn.Module:
        name = self.net.aliases.get(layer, layer)
        if name not in self.net.stage_names:
            raise ConfigurationError(
                f"tap layer {layer!r} not found; available: {', '.join(self.layers())}"
            )
        return getattr(self.net, name)

    def with_tap(self, layer: str) -> "TargetModel":
        """Same network, different tap layer (weights shared, not copied)."""
        other = copy.copy(self)
        other._resolve(layer)
        other.tap_layer = layer
        return other

    def feature_side(self, layer: str | None = None) -> int:
        return self.image_side // self.net.downsample_factor(layer or self.tap_layer)

    def feature_channels(self, layer: str | None = None) -> int:
        with torch.no_grad():
            _, f = self.forward_with_tap(torch.zeros(1, 3, self.image_side, self.image_side), layer)
        return f.shape[1]

    @property
    def zero_input(self) -> torch.Tensor:
        """The RGB colour the network's input normalisation maps to zero."""
        return self.net.normalize.mean.detach().reshape(-1).clone()

    def hash(self) -> str:
        return state_hash(self.net)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net(images)

    # -- tapping ---------------------------------------------------------

    def _to_spatial(self, out: torch.Tensor) -> torch.Tensor:
        if isinstance(self.net, ToyViT):
            tokens = out[:, 1:]
            side = int(math.isqrt(tokens.shape[1]))
            if side * side != tokens.shape[1]:
                raise ConfigurationError(f"token count {tokens.shape[1]} is not a square grid")
            return tokens.transpose(1, 2).reshape(out.shape[0], -1, side, side)
        return out

    def _from_spatial(self, feats: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        if isinstance(self.net, ToyViT):
            tokens = feats.flatten(2).transpose(1, 2)
            return torch.cat([like[:, :1], tokens.to(like.dtype)], dim=1)
        return feats.to(like.dtype)

    @contextmanager
    def _hook(self, layer: str, fn):
        handle = self._resolve(layer).register_forward_hook(fn)
        try:
            yield
        finally:
            handle.remove()

    def forward_with_tap(self, images: torch.Tensor, layer: str | None = None):
        """Return ``(logits, features)``; features are ``[B, C, s, s]`` (class token dropped for ViT)."""
        single = images.dim() == 3
        x = images.unsqueeze(0) if single else images
        captured = {}

        def hook(module, inputs, output):
            captured["out"] = output

        with self._hook(layer or self.tap_layer, hook), torch.no_grad():
            logits = self.net(x)
        feats = self._to_spatial(captured["out"])
        if single:
            return logits[0], feats[0]
        return logits, feats

    def gradient_map(self, images: torch.Tensor, classes, layer: str | None = None):
        """Features and d(logit[class]) / d(features) at the tap layer.

        Gradients are the raw signed gradients of the logit (not the softmax
        probability). Returns ``(logits, features, gradients)``, all detached.
        """
        single = images.dim() == 3
        x = images.unsqueeze(0) if single else images
        classes = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
        if classes.numel() == 1 and x.shape[0] > 1:
            classes = classes.expand(x.shape[0])
        if bool((classes < 0).any()) or bool((classes >= self.num_classes).any()):
            raise ConfigurationError(f"class index out of range for {self.num_classes} classes")
        captured = {}

        def hook(module, inputs, output):
            leaf = output.detach().requires_grad_(True)
            captured["out"] = leaf
            return leaf

        with self._hook(layer or self.tap_layer, hook), torch.enable_grad():
            logits = self.net(x)
            picked = logits.gather(1, classes.view(-1, 1)).sum()
            (grad,) = torch.autograd.grad(picked, captured["out"], allow_unused=True)
        if grad is None:
            raise ConfigurationError(f"logits do not depend on tap layer {layer or self.tap_layer!r}")
        feats = self._to_spatial(captured["out"].detach())
        grads = self._to_spatial(grad)
        logits = logits.detach()
        if single:
            return logits[0], feats[0], grads[0]
        return logits, feats, grads

    def logits_from_features(self, images: torch.Tensor, feats: torch.Tensor, layer: str | None = None):
        """Run the network with the tap layer's output replaced by ``feats``."""
        single = images.dim() == 3
        x = images.unsqueeze(0) if single else images
        f = feats.unsqueeze(0) if single else feats

        def hook(module, inputs, output):
            return self._from_spatial(f, output)

        with self._hook(layer or self.tap_layer, hook), torch.no_grad():
            logits = self.net(x)
        return logits[0] if single else logits

    # -- persistence ------------------------------------------------------

    def to_archive(self) -> dict:
        # metadata goes through JSON so equal values always pickle to equal bytes
        meta = json.loads(json.dumps({
            "arch": self.architecture,
            "hparams": self.net.hparams(),
            "image_side": self.image_side,
            "tap_layer": self.tap_layer,
            "seed": self.seed,
            "train_info": self.train_info,
        }, sort_keys=True))
        return {"kind": CHECKPOINT_KIND, **meta, "state_dict": self.net.state_dict()}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_archive(), path)
        return path

    @classmethod
    def from_archive(cls, archive: dict) -> "TargetModel":
        if archive.get("kind") != CHECKPOINT_KIND:
            raise ConfigurationError(f"not a target-model checkpoint (kind={archive.get('kind')!r})")
        net = build_toy(archive["arch"], **archive["hparams"])
        net.load_state_dict(archive["state_dict"])
        return cls(net, archive["image_side"], archive["tap_layer"], archive.get("seed"),
                   archive.get("train_info"))

    @classmethod
    def load(cls, path: str | Path) -> "TargetModel":
        return cls.from_archive(torch.load(path, map_location="cpu", weights_only=False))

    def clone(self) -> "TargetModel":
        return TargetModel(copy.deepcopy(self.net), self.image_side, self.tap_layer, self.seed,
                           copy.deepcopy(self.train_info))


def default_tap_layer(net: nn.Module) -> str:
    """Last conv stage for CNNs; the middle attention block for ViTs."""
    if isinstance(net, ToyViT):
        return f"attn_{max(1, net.depth // 2)}"
    return net.stage_names[-1]


@torch.no_grad()
def accuracy(net_or_target, ds: ImageDataset, batch_size: int = 256) -> float:
    net = net_or_target.net if isinstance(net_or_target, TargetModel) else net_or_target
    was_training = net.training
    net.eval()
    correct = 0
    for x, y in ds.batches(batch_size):
        correct += int((net(x).argmax(1) == y).sum())
    net.train(was_training)
    return correct / max(1, len(ds))


def train_toy_targets(
    train: ImageDataset,
    val: ImageDataset | None = None,
    arch: str = "cnn",
    epochs: int = 3,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
    tap_layer: str | None = None,
    **hparams,
) -> TargetModel:
    """Train a toy classifier from scratch and return it frozen."""
    if train.num_classes < 2 or len(torch.unique(train.labels)) < 2:
        raise ValueError("training set needs at least two classes")
    torch.manual_seed(seed)
    hparams.setdefault("num_classes", train.num_classes)
    if arch == "vit":
        hparams.setdefault("image_side", train.image_side)
    net = build_toy(arch, **hparams)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(epochs):
        net.train()
        total, n = 0.0, 0
        for x, y in train.batches(batch_size, shuffle=True, generator=gen):
            loss = F.cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"target training diverged at epoch {epoch + 1}",
                    diagnostics={"epoch": epoch + 1, "history": history, "lr": lr},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(y)
            n += len(y)
        rec = {"epoch": epoch + 1, "train_loss": total / n}
        if val is not None:
            rec["val_acc"] = accuracy(net, val)
        history.append(rec)
        logger.info("target epoch %d: %s", epoch + 1, rec)
    info = {"arch": arch, "epochs": epochs, "lr": lr, "batch_size": batch_size, "history": history}
    if val is not None:
        info["val_acc"] = history[-1]["val_acc"] if history else accuracy(net, val)
    return TargetModel(net, train.image_side, tap_layer, seed=seed, train_info=info)
