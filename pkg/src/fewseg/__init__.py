"""Episodic few-shot segmentation with iterative bi-directional fine-tuning."""

from .backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
