"""Pipelines, metrics, grid search, oracle labels and cross-validated evaluation."""

from roadkf.harness.metrics import cdf, he50, he95, percentile
from roadkf.harness.pipeline import METHODS, MethodConfig, PipelineResult, run_pipeline

__all__ = ["METHODS", "MethodConfig", "PipelineResult", "cdf", "he50", "he95", "percentile", "run_pipeline"]
