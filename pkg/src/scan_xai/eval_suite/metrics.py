"""Perturbation and confidence-masking metrics for saliency maps.

All metrics take a classifier callable (``images -> logits``), a batch of
images ``[N, 3, S, S]``, saliency maps ``[N, S, S]`` and one class per image.
Percentages are reported on a 0-100 scale.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from ..errors import DomainError

DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 10))
ORDERS = ("most_first", "least_first")
FILLS = ("zero", "mean")


@dataclass
class PerturbationCurve:
    fractions: list[float]
    accuracy: list[float]
    order: str

    def __post_init__(self):
        if len(self.fractions) != len(self.accuracy):
            raise DomainError("fractions and accuracy differ in length")
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise DomainError("fractions must be strictly increasing")


@dataclass
class PerturbationResult:
    auc: float
    curve: PerturbationCurve
    per_sample_auc: np.ndarray


@dataclass
class EvalReport:
    pos_auc: float
    neg_auc: float
    drop_pct: float
    inc_pct: float
    n_samples: int
    pos_curve: PerturbationCurve
    neg_curve: PerturbationCurve
    win_pct: float | None = None
    method: str = ""
    per_sample: dict = field(default_factory=dict, repr=False)
    config: dict = field(default_factory=dict)

    @property
    def auc_d(self) -> float:
        return self.neg_auc - self.pos_auc

    def to_dict(self, include_samples: bool = False) -> dict:
        d = {
            "method": self.method,
            "n_samples": self.n_samples,
            "auc_d": self.auc_d,
            "neg_auc": self.neg_auc,
            "pos_auc": self.pos_auc,
            "drop_pct": self.drop_pct,
            "inc_pct": self.inc_pct,
            "win_pct": self.win_pct,
            "curves": {"pos": asdict(self.pos_curve), "neg": asdict(self.neg_curve)},
            "config": self.config,
        }
        if include_samples:
            d["per_sample"] = {k: np.asarray(v).tolist() for k, v in self.per_sample.items()}
        return d

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def to_csv(self, path: str | Path) -> Path:
        """One row per sample with every per-sample quantity."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = sorted(self.per_sample)
        cols = [np.asarray(self.per_sample[k]) for k in keys]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", *keys])
            for i in range(self.n_samples):
                w.writerow([i, *(repr(float(c[i])) for c in cols)])
        return path


def _check_saliency(images: torch.Tensor, saliencies: torch.Tensor) -> None:
    if saliencies.shape != (images.shape[0], *images.shape[-2:]):
        raise DomainError(f"saliency shape {tuple(saliencies.shape)} does not match images {tuple(images.shape)}")
    if bool((saliencies < 0).any()) or bool((saliencies > 1).any()) or not bool(torch.isfinite(saliencies).all()):
        raise DomainError("saliency values must lie in [0, 1]")


@torch.no_grad()
def _predict(model: Callable, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    return torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


@torch.no_grad()
def masked_confidence(model: Callable, images: torch.Tensor, saliencies: torch.Tensor, classes,
                      batch_size: int = 256) -> dict:
    """Per-sample softmax confidence of ``classes`` on the original and the soft-masked image.

    ``classes=None`` uses the model's prediction on the original image.
    """
    _check_saliency(images, saliencies)
    logits = _predict(model, images, batch_size)
    classes = logits.argmax(1) if classes is None else torch.as_tensor(classes, dtype=torch.long)
    classes = classes.reshape(-1, 1)
    masked = images * saliencies.unsqueeze(1)
    y = logits.softmax(1).gather(1, classes).squeeze(1)
    o = _predict(model, masked, batch_size).softmax(1).gather(1, classes).squeeze(1)
    drop = (y - o).clamp(min=0) / y.clamp(min=1e-12)
    return {"original": y.double().numpy(), "masked": o.double().numpy(), "drop": drop.double().numpy(),
            "increase": (o > y).double().numpy()}


def masked_confidence_metrics(model: Callable, images: torch.Tensor, saliencies: torch.Tensor, classes,
                              batch_size: int = 256) -> tuple[float, float]:
    """(Drop%, Increase%) under multiplicative masking by the saliency map."""
    s = masked_confidence(model, images, saliencies, classes, batch_size)
    return 100.0 * float(np.mean(s["drop"])), 100.0 * float(np.mean(s["increase"]))


def win_metric(drops_by_method: Mapping[str, Sequence[float]]) -> dict[str, float]:
    """Share of samples on which each method has the lowest drop; ties split equally."""
    names = list(drops_by_method)
    if not names:
        return {}
    arrs = [np.asarray(drops_by_method[m], dtype=np.float64) for m in names]
    n = len(arrs[0])
    if any(a.shape != (n,) for a in arrs):
        raise DomainError("all methods must be evaluated on the same samples")
    if n == 0:
        raise DomainError("no samples to compare")
    d = np.stack(arrs)                       # [M, N]
    best = d == d.min(axis=0, keepdims=True)
    share = best / best.sum(axis=0, keepdims=True)
    return {m: 100.0 * float(share[i].mean()) for i, m in enumerate(names)}


def removal_order(saliencies: torch.Tensor, order: str) -> torch.Tensor:
    """Pixel indices per image in removal order; ties broken by pixel index."""
    if order not in ORDERS:
        raise DomainError(f"order must be one of {ORDERS}, got {order!r}")
    flat = saliencies.reshape(saliencies.shape[0], -1)
    key = -flat if order == "most_first" else flat
    return torch.argsort(key, dim=1, stable=True)


def removal_masks(saliencies: torch.Tensor, order: str, fractions: Sequence[float]) -> torch.Tensor:
    """Boolean ``[F, N, S*S]`` masks of removed pixels; nested across fractions."""
    n, hw = saliencies.shape[0], saliencies[0].numel()
    rank = torch.empty(n, hw, dtype=torch.long)
    rank.scatter_(1, removal_order(saliencies, order), torch.arange(hw).expand(n, hw))
    counts = [int(round(f * hw)) for f in fractions]
    return torch.stack([rank < c for c in counts])


def _fill_value(images: torch.Tensor, fill: str, model=None) -> torch.Tensor:
    """Replacement colour for removed pixels.

    ``zero`` means zero after the model's own input normalisation; models
    that expose ``zero_input`` supply that colour, anything else gets black.
    """
    if fill == "zero":
        zero = getattr(model, "zero_input", None)
        if zero is not None:
            return torch.as_tensor(zero, dtype=images.dtype).view(1, -1, 1, 1)
        return torch.zeros(1, images.shape[1], 1, 1, dtype=images.dtype)
    if fill == "mean":
        return images.mean(dim=(0, 2, 3)).view(1, -1, 1, 1)
    raise DomainError(f"fill must be one of {FILLS}, got {fill!r}")


@torch.no_grad()
def perturbation_auc(model: Callable, images: torch.Tensor, saliencies: torch.Tensor, classes=None,
                     order: str = "most_first", fractions: Sequence[float] = DEFAULT_FRACTIONS,
                     fill: str = "zero", reference: str = "prediction", batch_size: int = 256,
                     fill_value: torch.Tensor | None = None) -> PerturbationResult:
    """Sequential pixel removal in saliency order; area under accuracy vs. fraction, in percent.

    ``reference="prediction"`` scores agreement with the model's prediction
    on the unperturbed image; ``reference="label"`` scores against ``classes``.
    """
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise DomainError("fractions must not be empty")
    if any(not 0 < f < 1 for f in fractions):
        raise DomainError("fractions must lie in (0, 1)")
    _check_saliency(images, saliencies)
    if reference == "prediction":
        ref = _predict(model, images, batch_size).argmax(1)
    elif reference == "label":
        if classes is None:
            raise DomainError("reference='label' needs classes")
        ref = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
    else:
        raise DomainError(f"reference must be 'prediction' or 'label', got {reference!r}")
    fv = fill_value.view(1, -1, 1, 1) if fill_value is not None else _fill_value(images, fill, model)
    n, c, h, w = images.shape
    masks = removal_masks(saliencies, order, fractions).view(len(fractions), n, 1, h, w)
    hits = torch.empty(len(fractions), n, dtype=torch.float64)
    for k in range(len(fractions)):
        perturbed = torch.where(masks[k], fv, images)
        hits[k] = (_predict(model, perturbed, batch_size).argmax(1) == ref).double()
    acc = hits.mean(dim=1).numpy()
    fr = np.asarray(fractions)
    per_sample = _normalized_trapz(hits.numpy(), fr)
    auc = _normalized_trapz(acc[:, None], fr)[0]
    curve = PerturbationCurve(fractions=list(fractions), accuracy=[float(a) for a in acc], order=order)
    return PerturbationResult(auc=float(auc), curve=curve, per_sample_auc=per_sample)


def _normalized_trapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Trapezoid area of each column of ``y`` over ``x``, divided by the x-range, times 100."""
    if len(x) == 1:
        return 100.0 * y[0]
    return 100.0 * np.trapezoid(y, x, axis=0) / (x[-1] - x[0])


def evaluate_saliency(model: Callable, images: torch.Tensor, saliencies: torch.Tensor, classes,
                      fractions: Sequence[float] = DEFAULT_FRACTIONS, fill: str = "zero",
                      reference: str = "prediction", method: str = "", batch_size: int = 256,
                      fill_value: torch.Tensor | None = None) -> EvalReport:
    """All metrics for one method; Win% is filled in by :func:`compare_methods`."""
    conf = masked_confidence(model, images, saliencies, classes, batch_size)
    kw = dict(fractions=fractions, fill=fill, reference=reference, batch_size=batch_size, fill_value=fill_value)
    pos = perturbation_auc(model, images, saliencies, classes, order="most_first", **kw)
    neg = perturbation_auc(model, images, saliencies, classes, order="least_first", **kw)
    return EvalReport(
        pos_auc=pos.auc,
        neg_auc=neg.auc,
        drop_pct=100.0 * float(np.mean(conf["drop"])),
        inc_pct=100.0 * float(np.mean(conf["increase"])),
        n_samples=len(images),
        pos_curve=pos.curve,
        neg_curve=neg.curve,
        method=method,
        per_sample={
            "drop": conf["drop"],
            "increase": conf["increase"],
            "pos_auc": pos.per_sample_auc,
            "neg_auc": neg.per_sample_auc,
            "auc_d": neg.per_sample_auc - pos.per_sample_auc,
        },
        config={"fractions": list(fractions), "fill": fill, "reference": reference},
    )


def compare_methods(reports: Mapping[str, EvalReport]) -> dict[str, float]:
    """Fill ``win_pct`` on each report from per-sample drops and return the Win% table."""
    wins = win_metric({m: r.per_sample["drop"] for m, r in reports.items()})
    for m, r in reports.items():
        r.win_pct = wins[m]
    return wins


def average_reports(reports: Sequence[EvalReport], method: str = "") -> EvalReport:
    """Mean of several reports on the same samples (per-sample values averaged too)."""
    if not reports:
        raise DomainError("nothing to average")

    def mean_curve(curves):
        return PerturbationCurve(list(curves[0].fractions),
                                 [float(np.mean(v)) for v in zip(*(c.accuracy for c in curves))],
                                 curves[0].order)

    per_sample = {k: np.mean([r.per_sample[k] for r in reports], axis=0) for k in reports[0].per_sample}
    if "auc_d" in per_sample:
        # derived, not averaged, so AUC-D = Neg - Pos holds exactly per sample
        per_sample["auc_d"] = per_sample["neg_auc"] - per_sample["pos_auc"]
    return EvalReport(
        pos_auc=float(np.mean([r.pos_auc for r in reports])),
        neg_auc=float(np.mean([r.neg_auc for r in reports])),
        drop_pct=float(np.mean([r.drop_pct for r in reports])),
        inc_pct=float(np.mean([r.inc_pct for r in reports])),
        n_samples=reports[0].n_samples,
        pos_curve=mean_curve([r.pos_curve for r in reports]),
        neg_curve=mean_curve([r.neg_curve for r in reports]),
        method=method or reports[0].method,
        per_sample=per_sample,
        config={**reports[0].config, "n_repeats": len(reports)},
    )


def random_saliency_calibration(model: Callable, images: torch.Tensor, classes, n_random: int = 10,
                                seed: int = 0, **kwargs) -> EvalReport:
    """Metrics of uniform-random saliency maps, averaged over ``n_random`` draws per image."""
    if n_random < 1:
        raise DomainError("n_random must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    shape = (images.shape[0], *images.shape[-2:])
    reports = [
        evaluate_saliency(model, images, torch.rand(shape, generator=gen, dtype=images.dtype), classes,
                          method="random", **kwargs)
        for _ in range(n_random)
    ]
    rep = average_reports(reports, method="random")
    rep.config["seed"] = seed
    return rep


def bootstrap_pvalue(values: Sequence[float], n_boot: int = 10000, seed: int = 0) -> float:
    """One-sided bootstrap p-value for H0: mean(values) <= 0.

    Resamples the centred values and reports the share of bootstrap means at
    least as large as the observed mean.
    """
    v = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    obs = v.mean()
    centred = v - obs
    idx = rng.integers(0, len(v), size=(n_boot, len(v)))
    boot = centred[idx].mean(axis=1)
    return float((np.sum(boot >= obs) + 1) / (n_boot + 1))
