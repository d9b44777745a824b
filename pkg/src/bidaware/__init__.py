"""Bidding-aware ad retrieval at desk scale: marketplace, model, index, near-line, evaluation."""

__version__ = "0.1.0"
