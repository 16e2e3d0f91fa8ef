"""Federated LoRA training simulator for a dual-scale image transformer."""

__version__ = "0.1.0"
