"""Inference: turn a trained decoder into self-confidence saliency maps."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import core_math
from .analysis_net import Decoder
from .errors import ConfigurationError, DomainError
from .feature_tap import TargetModel
from .masking import gradient_mask

DEFAULT_PERCENTILE = 95.0


@dataclass
class Explanation:
    saliency: torch.Tensor         # [S, S] in [0, 1]
    reconstruction: torch.Tensor   # [3, S, S]
    coarse_saliency: torch.Tensor  # [S, S], pooled to the tap grid then upsampled
    target_class: int
    percentile_used: float
    mask: torch.Tensor             # binary feature mask actually applied

    @property
    def mean(self) -> float:
        return float(self.saliency.mean())


@dataclass
class ExplanationBatch:
    saliency: torch.Tensor         # [B, S, S]
    reconstruction: torch.Tensor   # [B, 3, S, S]
    coarse_saliency: torch.Tensor  # [B, S, S]
    target_class: torch.Tensor     # [B]
    percentile_used: float
    mask: torch.Tensor             # [B, C, s, s]

    def __len__(self):
        return len(self.target_class)

    def item(self, i: int) -> Explanation:
        return Explanation(self.saliency[i], self.reconstruction[i], self.coarse_saliency[i],
                           int(self.target_class[i]), self.percentile_used, self.mask[i])


def coarsen(saliency: torch.Tensor, side: int) -> torch.Tensor:
    """Average-pool a saliency map to ``side x side`` and bilinearly upsample back."""
    single = saliency.dim() == 2
    s = saliency.unsqueeze(0) if single else saliency
    full = s.shape[-1]
    pooled = F.adaptive_avg_pool2d(s.unsqueeze(1), side)
    up = F.interpolate(pooled, size=(full, full), mode="bilinear", align_corners=False).squeeze(1)
    up = up.clamp(0.0, 1.0)
    return up[0] if single else up


def check_compatible(decoder: Decoder, target: TargetModel) -> None:
    cfg = decoder.cfg
    if cfg.image_side != target.image_side or cfg.feature_side != target.feature_side():
        raise ConfigurationError(
            f"decoder geometry ({cfg.feature_side}->{cfg.image_side}) does not match target tap "
            f"{target.tap_layer!r} ({target.feature_side()}->{target.image_side})"
        )
    if cfg.input_channels != target.feature_channels():
        raise ConfigurationError(
            f"decoder expects {cfg.input_channels} feature channels, tap {target.tap_layer!r} has "
            f"{target.feature_channels()}"
        )


@torch.no_grad()
def _tap(target: TargetModel, images: torch.Tensor, classes):
    logits, _ = target.forward_with_tap(images)
    if classes is None:
        classes = logits.argmax(1)
    classes = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
    if classes.numel() == 1 and len(images) > 1:
        classes = classes.expand(len(images)).clone()
    _, feats, grads = target.gradient_map(images, classes)
    return classes, feats, grads


@torch.no_grad()
def _decode(decoder, feats, grads, classes, p, conf_variant, coarse_side):
    if not 0 <= p <= 100:
        raise DomainError(f"percentile must be in [0, 100], got {p}")
    masked = gradient_mask(feats, grads, p)
    out = decoder(masked.values)
    recon, y_c = core_math.split_output(out)
    sal = core_math.confidence_activation(y_c, conf_variant).values
    return ExplanationBatch(sal, recon, coarsen(sal, coarse_side), classes, float(p), masked.mask)


@torch.no_grad()
def explain_batch(decoder: Decoder, target: TargetModel, images: torch.Tensor, classes=None,
                  p: float = DEFAULT_PERCENTILE, conf_variant: str = "sine",
                  coarse_side: int | None = None, batch_size: int = 128) -> ExplanationBatch:
    """Explanations for a batch ``[B, 3, S, S]``; ``classes`` defaults to the predicted class."""
    check_compatible(decoder, target)
    decoder.eval()
    coarse_side = coarse_side or target.feature_side()
    parts = []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        c = None if classes is None else torch.as_tensor(classes).reshape(-1)
        if c is not None and c.numel() > 1:
            c = c[start:start + batch_size]
        cls, feats, grads = _tap(target, x, c)
        parts.append(_decode(decoder, feats, grads, cls, p, conf_variant, coarse_side))
    return ExplanationBatch(
        torch.cat([b.saliency for b in parts]),
        torch.cat([b.reconstruction for b in parts]),
        torch.cat([b.coarse_saliency for b in parts]),
        torch.cat([b.target_class for b in parts]),
        float(p),
        torch.cat([b.mask for b in parts]),
    )


def explain(decoder: Decoder, target: TargetModel, image: torch.Tensor, class_idx: int | None = None,
            p: float = DEFAULT_PERCENTILE, conf_variant: str = "sine",
            coarse_side: int | None = None) -> Explanation:
    """Self-confidence explanation of one ``[3, S, S]`` image."""
    if image.dim() != 3:
        raise DomainError(f"expected a single [3, S, S] image, got {tuple(image.shape)}")
    return explain_batch(decoder, target, image.unsqueeze(0), class_idx, p, conf_variant,
                         coarse_side).item(0)


@torch.no_grad()
def percentile_sweep(decoder: Decoder, target: TargetModel, image: torch.Tensor, class_idx: int | None,
                     ps, conf_variant: str = "sine", coarse_side: int | None = None) -> list[Explanation]:
    """One explanation per percentile, sharing a single feature/gradient pass."""
    ps = [float(p) for p in ps]
    for p in ps:
        if not 0 <= p <= 100:
            raise DomainError(f"percentile must be in [0, 100], got {p}")
    if not ps:
        return []
    check_compatible(decoder, target)
    decoder.eval()
    coarse_side = coarse_side or target.feature_side()
    cls, feats, grads = _tap(target, image.unsqueeze(0), class_idx)
    return [_decode(decoder, feats, grads, cls, p, conf_variant, coarse_side).item(0) for p in ps]


@torch.no_grad()
def percentile_sweep_batch(decoder: Decoder, target: TargetModel, images: torch.Tensor, classes,
                           ps, conf_variant: str = "sine", batch_size: int = 128) -> dict[float, ExplanationBatch]:
    """Batched sweep: ``{p: ExplanationBatch}`` with one tap pass per chunk."""
    check_compatible(decoder, target)
    decoder.eval()
    coarse_side = target.feature_side()
    out: dict[float, list] = {float(p): [] for p in ps}
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        c = None if classes is None else torch.as_tensor(classes).reshape(-1)[start:start + batch_size]
        cls, feats, grads = _tap(target, x, c)
        for p in out:
            out[p].append(_decode(decoder, feats, grads, cls, p, conf_variant, coarse_side))
    return {
        p: ExplanationBatch(
            torch.cat([b.saliency for b in parts]),
            torch.cat([b.reconstruction for b in parts]),
            torch.cat([b.coarse_saliency for b in parts]),
            torch.cat([b.target_class for b in parts]),
            p,
            torch.cat([b.mask for b in parts]),
        )
        for p, parts in out.items()
    }
