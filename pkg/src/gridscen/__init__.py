"""Power-flow scenario generation and physics-residual evaluation."""

__version__ = "0.1.0"
