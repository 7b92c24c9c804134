"""Ablation grid runner for multimodal hateful-content classification."""

__version__ = "0.1.0"
