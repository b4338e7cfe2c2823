"""Sparse aligned-pair self-distillation with masked pixel prediction, at desk scale."""

__version__ = "0.1.0"
