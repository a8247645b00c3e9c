"""Online domain adaptation with hardware-aware modular training."""

__version__ = "0.1.0"
