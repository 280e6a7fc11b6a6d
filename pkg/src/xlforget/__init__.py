"""Desk-scale multilingual continual-learning lab: regimes, LoRA and transfer metrics."""

__version__ = "0.1.0"
