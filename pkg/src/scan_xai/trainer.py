"""Training loop for the analysis decoder against a frozen target."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import core_math
from .analysis_net import Decoder, DecoderConfig, build_decoder
from .data import ImageDataset
from .errors import ConfigurationError, DomainError, TrainingError
from .feature_tap import TargetModel
from .masking import TRAIN_PERCENTILE_RANGE, gradient_mask, sample_training_percentile

logger = logging.getLogger(__name__)

ABLATIONS = ("alpha_one", "no_gradient_mask", "no_blur", "sigmoid_conf")


@dataclass
class TrainConfig:
    alpha: float = 4.0
    lam: float = core_math.DEFAULT_LAMBDA
    inference_percentile: float = 95.0
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    tap_layer: str | None = None
    use_gradient_mask: bool = True
    use_blur: bool = True
    conf_variant: str = "sine"
    base_width: int = 64
    per_channel_mask: bool = False
    train_percentile_range: tuple[float, float] = TRAIN_PERCENTILE_RANGE

    def __post_init__(self):
        lo, hi = self.train_percentile_range = tuple(float(v) for v in self.train_percentile_range)
        if not 0 <= lo <= hi <= 100:
            raise DomainError(f"training percentile range must lie in [0, 100], got {(lo, hi)}")
        if not self.alpha > 0:
            raise DomainError(f"alpha must be > 0, got {self.alpha}")
        if self.lam < 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.inference_percentile <= 100:
            raise DomainError(f"inference percentile must be in [0, 100], got {self.inference_percentile}")
        if self.conf_variant not in core_math.CONF_VARIANTS:
            raise DomainError(f"unknown confidence variant {self.conf_variant!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs must be >= 0 and batch_size >= 1")

    @property
    def effective_inference_percentile(self) -> float:
        return self.inference_percentile if self.use_gradient_mask else 0.0


def ablation_variant(cfg: TrainConfig, variant: str | None) -> TrainConfig:
    """Toggle exactly one SCAN component off (or swap it) on a copy of ``cfg``."""
    if variant in (None, "none"):
        return replace(cfg)
    if variant == "alpha_one":
        return replace(cfg, alpha=1.0)
    if variant == "no_gradient_mask":
        return replace(cfg, use_gradient_mask=False)
    if variant == "no_blur":
        return replace(cfg, use_blur=False)
    if variant == "sigmoid_conf":
        return replace(cfg, conf_variant="sigmoid")
    raise ConfigurationError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"type": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"type": "epoch", **rec}, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("type")
                (log.steps if kind == "step" else log.epochs).append(rec)
        return log


def decoder_config_for(target: TargetModel, base_width: int = 64) -> DecoderConfig:
    return DecoderConfig(
        variant="transformer" if target.architecture == "vit" else "residual",
        input_channels=target.feature_channels(),
        feature_side=target.feature_side(),
        image_side=target.image_side,
        base_width=base_width,
    )


def recon_target(images: torch.Tensor, feature_side: int, use_blur: bool = True) -> core_math.ReconTarget:
    if use_blur:
        return core_math.blur_target(images, feature_side)
    return core_math.identity_target(images)


@torch.no_grad()
def _tap_all(target: TargetModel, ds: ImageDataset, batch_size: int = 256):
    """Features and true-label gradients for every image, computed once."""
    feats, grads = [], []
    for x, y in ds.batches(batch_size):
        _, f, g = target.gradient_map(x, y)
        feats.append(f)
        grads.append(g)
    return torch.cat(feats), torch.cat(grads)


def _mask(feats, grads, p, cfg: TrainConfig):
    if not cfg.use_gradient_mask:
        return feats
    return gradient_mask(feats, grads, p, per_channel=cfg.per_channel_mask).values


@torch.no_grad()
def evaluate_decoder(decoder: Decoder, target: TargetModel, ds: ImageDataset, cfg: TrainConfig,
                     tapped=None, batch_size: int = 128) -> dict:
    """Mean confidence area and mean loss terms at the inference percentile."""
    was = decoder.training
    decoder.eval()
    feats, grads = tapped if tapped is not None else _tap_all(target, ds)
    s_f = decoder.cfg.feature_side
    sums = {"total": 0.0, "conf_loss": 0.0, "recon_loss": 0.0, "c_mean": 0.0}
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        x = ds.images[sl]
        masked = _mask(feats[sl], grads[sl], cfg.effective_inference_percentile, cfg)
        terms = core_math.total_loss(decoder(masked), recon_target(x, s_f, cfg.use_blur),
                                     cfg.alpha, cfg.lam, cfg.conf_variant)
        n = len(x)
        for k in sums:
            sums[k] += float(getattr(terms, k)) * n
    decoder.train(was)
    return {k: v / len(ds) for k, v in sums.items()}


def train_scan(target: TargetModel, train: ImageDataset, cfg: TrainConfig,
               val: ImageDataset | None = None, decoder: Decoder | None = None) -> tuple[Decoder, TrainLog]:
    """Fit a decoder to reconstruct blurred images from gradient-masked features."""
    if cfg.tap_layer and cfg.tap_layer != target.tap_layer:
        target = target.with_tap(cfg.tap_layer)
    if not target.frozen:
        raise ConfigurationError("target model must be frozen")
    if train.image_side != target.image_side or (val is not None and val.image_side != target.image_side):
        raise ConfigurationError(
            f"dataset images are {train.image_side}px but the target expects {target.image_side}px"
        )
    before = target.hash()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed)
    if decoder is None:
        decoder = build_decoder(decoder_config_for(target, cfg.base_width))
    opt = torch.optim.Adam(decoder.parameters(), lr=cfg.learning_rate)
    feats, grads = _tap_all(target, train)
    val_tapped = _tap_all(target, val) if val is not None else None
    s_f = decoder.cfg.feature_side
    log = TrainLog()
    last_good = copy.deepcopy(decoder.state_dict())
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        decoder.train()
        order = torch.randperm(len(train), generator=shuffle_gen)
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = train.images[idx]
            p = torch.from_numpy(sample_training_percentile(rng, size=len(idx), bounds=cfg.train_percentile_range))
            masked = _mask(feats[idx], grads[idx], p, cfg)
            out = decoder(masked)
            if not bool(torch.isfinite(out).all()):
                raise TrainingError(f"non-finite decoder output at step {step}", last_good,
                                    {"epoch": epoch, "step": step})
            terms = core_math.total_loss(out, recon_target(x, s_f, cfg.use_blur), cfg.alpha, cfg.lam,
                                         cfg.conf_variant)
            if not math.isfinite(float(terms.total.detach())):
                raise TrainingError(f"loss became NaN at step {step}", last_good,
                                    {"epoch": epoch, "step": step, "last": log.steps[-1:]})
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            step += 1
            log.steps.append({
                "step": step,
                "epoch": epoch,
                "conf_loss": float(terms.conf_loss.detach()),
                "recon_loss": float(terms.recon_loss.detach()),
                "total": float(terms.total.detach()),
                "c_mean": float(terms.c_mean.detach()),
                "percentile_mean": float(p.mean()) if cfg.use_gradient_mask else 0.0,
            })
        last_good = copy.deepcopy(decoder.state_dict())
        rec = {"epoch": epoch}
        if val is not None:
            ev = evaluate_decoder(decoder, target, val, cfg, tapped=val_tapped)
            rec.update({"val_c_mean": ev["c_mean"], "val_total": ev["total"]})
        log.epochs.append(rec)
        logger.info("scan epoch %d: %s", epoch, rec)
    decoder.eval()
    if target.hash() != before:
        raise TrainingError("target weights changed during SCAN training")
    return decoder, log


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
