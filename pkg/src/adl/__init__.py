"""Attention distillation lab: a small cross-modal attention-transfer testbed."""

__version__ = "0.1.0"
