"""Risk-aware traffic engineering as an unrolled, learnable optimizer."""

__version__ = "0.1.0"
