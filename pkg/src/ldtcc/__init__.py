"""Rare-event probabilities and rare chance constraints via LDT dominating points."""
__version__ = "0.1.0"
