"""The SCAN analysis network: masked features in, 4-channel image out."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigurationError, DomainError

CHECKPOINT_KIND = "scan_xai.decoder"
VARIANTS = ("residual", "transformer")


@dataclass
class DecoderConfig:
    variant: str
    input_channels: int
    feature_side: int
    image_side: int
    n_attention_blocks: int = 4
    base_width: int = 64
    min_width: int = 32
    attention_heads: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown decoder variant {self.variant!r}")
        if self.feature_side < 1 or self.image_side % self.feature_side:
            raise ConfigurationError(
                f"image side {self.image_side} is not a multiple of feature side {self.feature_side}"
            )
        ratio = self.image_side // self.feature_side
        if ratio < 2 or ratio & (ratio - 1):
            raise ConfigurationError(
                f"image/feature ratio {ratio} must be a power of two >= 2"
            )

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.image_side // self.feature_side))

    def widths(self) -> list[int]:
        """Channel count entering each stage, plus the final one."""
        w = [self.base_width]
        for _ in range(self.n_stages):
            w.append(max(w[-1] // 2, self.min_width))
        return w


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(_groups(ch), ch),
            nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(_groups(ch), ch),
        )
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(x + self.body(x))


class UpStage(nn.Sequential):
    """Two residual blocks followed by a x2 transposed convolution."""

    def __init__(self, cin: int, cout: int):
        super().__init__(
            ResidualBlock(cin),
            ResidualBlock(cin),
            # no normalisation here: it would strip per-sample colour statistics
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
            nn.ReLU(),
        )


class TokenMixer(nn.Module):
    """Self-attention blocks over the ``s_f x s_f`` grid with learned positions."""

    def __init__(self, dim: int, side: int, n_blocks: int, heads: int):
        super().__init__()
        if dim % heads:
            heads = 1
        self.pos = nn.Parameter(torch.zeros(1, side * side, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(
            dim, heads, dim_feedforward=2 * dim, dropout=0.0, batch_first=True, norm_first=True
        )
        self.blocks = nn.TransformerEncoder(layer, n_blocks, enable_nested_tensor=False)

    def forward(self, x):
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2) + self.pos
        t = self.blocks(t)
        return t.transpose(1, 2).reshape(b, c, h, w)


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.mixer = (
            TokenMixer(cfg.input_channels, cfg.feature_side, cfg.n_attention_blocks, cfg.attention_heads)
            if cfg.variant == "transformer"
            else None
        )
        self.stem = nn.Conv2d(cfg.input_channels, widths[0], 1)
        self.stages = nn.Sequential(*(UpStage(widths[i], widths[i + 1]) for i in range(cfg.n_stages)))
        self.project = nn.Conv2d(widths[-1], 4, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mixer is not None:
            x = self.mixer(x)
        return self.project(self.stages(self.stem(x)))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_decoder(cfg: DecoderConfig) -> Decoder:
    return Decoder(cfg)


def decode(decoder: Decoder, x) -> torch.Tensor:
    """Run the decoder on a masked feature map (``MaskedFeature`` or tensor).

    Accepts ``[C, s, s]`` or ``[B, C, s, s]``; returns ``[4, S, S]`` or
    ``[B, 4, S, S]`` accordingly.
    """
    values = x.values if hasattr(x, "values") and not torch.is_tensor(x) else x
    single = values.dim() == 3
    v = values.unsqueeze(0) if single else values
    cfg = decoder.cfg
    if v.shape[1] != cfg.input_channels or v.shape[-1] != cfg.feature_side or v.shape[-2] != cfg.feature_side:
        raise DomainError(
            f"decoder expects [*, {cfg.input_channels}, {cfg.feature_side}, {cfg.feature_side}], "
            f"got {tuple(values.shape)}"
        )
    out = decoder(v)
    return out[0] if single else out


def save_decoder(decoder: Decoder, path: str | Path, seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # metadata goes through JSON so equal values always pickle to equal bytes
    meta = json.loads(json.dumps({"arch": decoder.cfg.variant, "config": asdict(decoder.cfg), "seed": seed,
                                  "extra": extra or {}}, sort_keys=True))
    torch.save({"kind": CHECKPOINT_KIND, **meta, "state_dict": decoder.state_dict()}, path)
    return path


def load_decoder(path: str | Path) -> tuple[Decoder, dict]:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if archive.get("kind") != CHECKPOINT_KIND:
        raise ConfigurationError(f"{path} is not a decoder checkpoint")
    dec = Decoder(DecoderConfig(**archive["config"]))
    dec.load_state_dict(archive["state_dict"])
    dec.eval()
    return dec, archive
