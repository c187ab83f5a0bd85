"""Slotted-network video streaming simulator and optimization library."""

from . import adaptation, allocation, metrics, nova_engine, oracle, qr_model, tracegen

__all__ = [
    "adaptation",
    "allocation",
    "metrics",
    "nova_engine",
    "oracle",
    "qr_model",
    "tracegen",
]
