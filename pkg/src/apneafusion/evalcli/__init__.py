"""Metrics, the experiment grid, and the command-line interface."""

from .metrics import UndefinedMetricError, auroc, binarize, f1

__all__ = ["auroc", "binarize", "f1", "UndefinedMetricError"]
