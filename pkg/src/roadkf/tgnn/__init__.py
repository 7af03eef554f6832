"""Temporal graph network for road-segment selection."""

from roadkf.tgnn.model import KINDS, GraphBatch, TgnnConfig, TgnnModel, ablation_variant, make_batch

__all__ = ["KINDS", "GraphBatch", "TgnnConfig", "TgnnModel", "ablation_variant", "make_batch"]
