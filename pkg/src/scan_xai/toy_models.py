"""Desk-scale target classifiers: a small CNN and a small ViT.

Both expose their intermediate layers as named submodules so that
:class:`scan_xai.feature_tap.TargetModel` can resolve a tap by name.
"""
from __future__ import annotations

import torch
import torch.nn as nn


class Normalize(nn.Module):
    """Fixed per-channel standardisation, so models consume images in [0, 1]."""

    def __init__(self, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _conv_bn(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


class ConvStage(nn.Sequential):
    def __init__(self, cin, cout, stride):
        super().__init__(_conv_bn(cin, cout, stride), _conv_bn(cout, cout, 1))


class ToyCNN(nn.Module):
    """Stem plus three stride-2 stages: a 32x32 input ends on a 4x4 grid.

    A 1x1 conv head with its own ReLU sits between the last stage and global
    pooling, so gradients w.r.t. the last stage vary across space.
    """

    arch = "cnn"
    stage_names = ("stem", "conv_stage_1", "conv_stage_2", "conv_stage_3")
    aliases = {"final_conv": "conv_stage_3"}

    def __init__(self, num_classes=2, widths=(16, 32, 64, 64), head_width=64):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.head_width = head_width
        self.normalize = Normalize()
        self.stem = _conv_bn(3, widths[0], 1)
        self.conv_stage_1 = ConvStage(widths[0], widths[1], 2)
        self.conv_stage_2 = ConvStage(widths[1], widths[2], 2)
        self.conv_stage_3 = ConvStage(widths[2], widths[3], 2)
        self.head = nn.Sequential(nn.Conv2d(widths[3], head_width, 1), nn.ReLU(inplace=False))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(head_width, num_classes)

    def hparams(self):
        return {"num_classes": self.num_classes, "widths": list(self.widths), "head_width": self.head_width}

    def downsample_factor(self, layer: str) -> int:
        layer = self.aliases.get(layer, layer)
        return 2 ** self.stage_names.index(layer)

    def forward(self, x):
        x = self.normalize(x)
        x = self.stem(x)
        x = self.conv_stage_1(x)
        x = self.conv_stage_2(x)
        x = self.conv_stage_3(x)
        x = self.head(x)
        return self.fc(self.pool(x).flatten(1))


class ViTBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ToyViT(nn.Module):
    """Pre-norm ViT with a class token; blocks are named ``attn_1`` ... ``attn_depth``."""

    arch = "vit"

    def __init__(self, num_classes=2, image_side=32, patch=4, dim=128, depth=6, heads=4):
        super().__init__()
        if image_side % patch:
            raise ValueError(f"image side {image_side} not divisible by patch {patch}")
        self.num_classes = num_classes
        self.image_side = image_side
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.grid = image_side // patch
        self.normalize = Normalize()
        self.patch_embed = nn.Conv2d(3, dim, patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid**2 + 1, dim))
        for i in range(1, depth + 1):
            self.add_module(f"attn_{i}", ViTBlock(dim, heads))
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, num_classes)
        self.reset_embeddings()

    @property
    def stage_names(self):
        return tuple(f"attn_{i}" for i in range(1, self.depth + 1))

    aliases: dict = {}

    def reset_embeddings(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def hparams(self):
        return {
            "num_classes": self.num_classes,
            "image_side": self.image_side,
            "patch": self.patch,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
        }

    def downsample_factor(self, layer: str) -> int:
        return self.patch

    def forward(self, x):
        x = self.patch_embed(self.normalize(x)).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for i in range(1, self.depth + 1):
            x = getattr(self, f"attn_{i}")(x)
        return self.fc(self.norm(x)[:, 0])


def build_toy(arch: str, **hparams) -> nn.Module:
    if arch == "cnn":
        hparams.pop("image_side", None)
        return ToyCNN(**hparams)
    if arch == "vit":
        return ToyViT(**hparams)
    raise ValueError(f"unknown architecture {arch!r}")


def reinitialize(net: nn.Module) -> None:
    """Re-draw every parameter from the architecture's initialisation distribution."""
    for m in net.modules():
        if m is not net and hasattr(m, "reset_parameters"):
            m.reset_parameters()
        elif isinstance(m, nn.MultiheadAttention):
            m._reset_parameters()
        if isinstance(m, nn.BatchNorm2d):
            m.reset_running_stats()
    if isinstance(net, ToyViT):
        net.reset_embeddings()
