"""Multimodal driving-scene sequence generation on a synthetic desk-scale world."""

__version__ = "0.1.0"
