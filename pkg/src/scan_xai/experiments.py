"""End-to-end experiment recipes shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from .analysis_net import Decoder
from .data import DatasetSplit
from .errors import ConfigurationError
from .eval_suite import (
    EvalReport,
    compare_methods,
    evaluate_saliency,
    gradcam_lite,
    random_saliency_calibration,
    sanity_randomize,
)
from .explainer import explain_batch, percentile_sweep_batch
from .feature_tap import TargetModel
from .trainer import ABLATIONS, TrainConfig, ablation_variant, train_scan

logger = logging.getLogger(__name__)

METHODS = ("scan", "gradcam", "random")


def scan_saliency(decoder: Decoder, target: TargetModel, images: torch.Tensor, p: float = 95.0,
                  coarse: bool = False, conf_variant: str = "sine") -> tuple[torch.Tensor, torch.Tensor]:
    """SCAN maps for ``images`` at percentile ``p`` and the explained (predicted) classes."""
    e = explain_batch(decoder, target, images, None, p, conf_variant)
    return (e.coarse_saliency if coarse else e.saliency), e.target_class


def evaluate_methods(target: TargetModel, images: torch.Tensor, methods: Sequence[str],
                     decoder: Decoder | None = None, p: float = 95.0, coarse: bool = False,
                     n_random: int = 10, seed: int = 0, conf_variant: str = "sine",
                     **metric_kw) -> dict[str, EvalReport]:
    """One report per method on the same images; Win% is filled when several methods run."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigurationError(f"unknown method(s) {unknown}; expected a subset of {METHODS}")
    if not methods:
        raise ConfigurationError("no methods requested")
    reports = {}
    for m in methods:
        if m == "scan":
            if decoder is None:
                raise ConfigurationError("method 'scan' needs a trained decoder")
            sal, cls = scan_saliency(decoder, target, images, p, coarse, conf_variant)
            rep = evaluate_saliency(target, images, sal, cls, method="scan", **metric_kw)
            rep.config.update({"percentile": p, "coarse": coarse})
        elif m == "gradcam":
            rep = evaluate_saliency(target, images, gradcam_lite(target, images), None, method="gradcam",
                                    **metric_kw)
        else:
            rep = random_saliency_calibration(target, images, None, n_random=n_random, seed=seed, **metric_kw)
        reports[m] = rep
    if len(reports) > 1:
        compare_methods(reports)
    return reports


def percentile_sweep_reports(decoder: Decoder, target: TargetModel, images: torch.Tensor,
                             ps: Sequence[float], coarse: bool = False, conf_variant: str = "sine",
                             **metric_kw) -> dict[float, EvalReport]:
    """Evaluate one decoder at several inference percentiles."""
    sweep = percentile_sweep_batch(decoder, target, images, None, ps, conf_variant)
    out = {}
    for p, batch in sweep.items():
        sal = batch.coarse_saliency if coarse else batch.saliency
        rep = evaluate_saliency(target, images, sal, batch.target_class, method=f"scan@P{p:g}", **metric_kw)
        rep.config.update({"percentile": p, "coarse": coarse})
        out[p] = rep
    return out


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation; NaN when either input is constant."""
    if len(set(x)) < 2 or len(set(y)) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def _train_and_score(target: TargetModel, split: DatasetSplit, cfg: TrainConfig, images: torch.Tensor,
                     p: float | None = None, coarse: bool = False, **metric_kw) -> EvalReport:
    decoder, _ = train_scan(target, split.train, cfg)
    tap = target.with_tap(cfg.tap_layer) if cfg.tap_layer else target
    p = cfg.effective_inference_percentile if p is None else p
    rep = evaluate_methods(tap, images, ["scan"], decoder, p, coarse, conf_variant=cfg.conf_variant,
                           **metric_kw)["scan"]
    return rep


def ablation_grid(target: TargetModel, split: DatasetSplit, base: TrainConfig, images: torch.Tensor, *,
                  alphas: Sequence[float] = (), percentiles: Sequence[float] = (),
                  layers: Sequence[str] = (), components: Sequence[str] = (),
                  percentile_mode: str = "inference", coarse: bool = False,
                  **metric_kw) -> dict[str, dict]:
    """Train-and-evaluate sweeps; returns ``{sweep: {column: EvalReport}}``.

    ``percentile_mode="inference"`` trains a single decoder and varies the
    inference percentile; ``"train"`` fixes the mask percentile to each grid
    value for both training and inference.
    """
    if not any((alphas, percentiles, layers, components)):
        raise ConfigurationError("ablation grid is empty")
    bad = [c for c in components if c not in ("none", *ABLATIONS)]
    if bad:
        raise ConfigurationError(f"unknown component ablation(s) {bad}")
    if percentile_mode not in ("inference", "train"):
        raise ConfigurationError(f"percentile mode must be 'inference' or 'train', got {percentile_mode!r}")
    out: dict[str, dict] = {}
    if alphas:
        out["alpha"] = {a: _train_and_score(target, split, replace(base, alpha=float(a)), images,
                                            coarse=coarse, **metric_kw) for a in alphas}
    if percentiles:
        if percentile_mode == "inference":
            decoder, _ = train_scan(target, split.train, base)
            out["percentile"] = percentile_sweep_reports(decoder, target, images, percentiles, coarse,
                                                         base.conf_variant, **metric_kw)
        else:
            out["percentile"] = {
                float(p): _train_and_score(
                    target, split,
                    replace(base, train_percentile_range=(float(p), float(p)), inference_percentile=float(p)),
                    images, coarse=coarse, **metric_kw)
                for p in percentiles
            }
    if layers:
        out["layer"] = {layer: _train_and_score(target, split, replace(base, tap_layer=layer), images,
                                                coarse=coarse, **metric_kw) for layer in layers}
    if components:
        out["component"] = {c: _train_and_score(target, split, ablation_variant(base, c), images,
                                                coarse=coarse, **metric_kw) for c in components}
    return out


def sanity_check(target: TargetModel, split: DatasetSplit, cfg: TrainConfig, images: torch.Tensor,
                 decoder: Decoder | None = None, seed: int = 0, target_epochs: int | None = None,
                 coarse: bool = False, **metric_kw) -> dict[str, EvalReport]:
    """SCAN AUC-D on the intact, weight-randomised and label-randomised targets.

    Each randomised target gets its own decoder, trained with ``cfg`` exactly
    as the intact one was.
    """
    if decoder is None:
        decoder, _ = train_scan(target, split.train, cfg)
    rows = {"intact": evaluate_methods(target, images, ["scan"], decoder, cfg.effective_inference_percentile,
                                       coarse, conf_variant=cfg.conf_variant, **metric_kw)["scan"]}
    for mode in ("weights", "labels"):
        rnd = sanity_randomize(target, mode, seed=seed, train=split.train, val=split.val, epochs=target_epochs)
        rows[mode] = _train_and_score(rnd, split, cfg, images, coarse=coarse, **metric_kw)
        logger.info("sanity %s: AUC-D %.2f", mode, rows[mode].auc_d)
    for name, rep in rows.items():
        rep.method = f"scan/{name}"
    return rows


def summary_row(rep: EvalReport) -> dict[str, float | None]:
    return {"auc_d": rep.auc_d, "neg_auc": rep.neg_auc, "pos_auc": rep.pos_auc,
            "drop_pct": rep.drop_pct, "inc_pct": rep.inc_pct, "win_pct": rep.win_pct}


def per_sample_auc_d(rep: EvalReport) -> np.ndarray:
    return np.asarray(rep.per_sample["auc_d"], dtype=np.float64)
