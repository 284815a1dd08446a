"""Quantitative evaluation of saliency maps."""
from .baselines import gradcam_lite, random_saliency
from .metrics import (
    DEFAULT_FRACTIONS,
    EvalReport,
    PerturbationCurve,
    average_reports,
    bootstrap_pvalue,
    compare_methods,
    evaluate_saliency,
    masked_confidence_metrics,
    perturbation_auc,
    random_saliency_calibration,
    win_metric,
)
from .sanity import sanity_randomize

__all__ = [
    "DEFAULT_FRACTIONS",
    "EvalReport",
    "PerturbationCurve",
    "average_reports",
    "bootstrap_pvalue",
    "compare_methods",
    "evaluate_saliency",
    "gradcam_lite",
    "masked_confidence_metrics",
    "perturbation_auc",
    "random_saliency",
    "random_saliency_calibration",
    "sanity_randomize",
    "win_metric",
]
