"""Attention/IoU statistics over evaluation sets."""

from .attention_analysis import (
    AnalysisReport,
    CurveInterval,
    EvalRecord,
    HistogramBin,
    accuracy,
    attention_grids,
    attention_histogram,
    box_ratio_curve,
    build_report,
    collect,
    export_csv,
    layer_rho_profile,
)

__all__ = [
    "AnalysisReport",
    "CurveInterval",
    "EvalRecord",
    "HistogramBin",
    "accuracy",
    "attention_grids",
    "attention_histogram",
    "box_ratio_curve",
    "build_report",
    "collect",
    "export_csv",
    "layer_rho_profile",
]
