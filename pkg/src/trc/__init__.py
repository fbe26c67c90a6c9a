"""TRC: weight-shared iterative refinement of control sequences."""

__version__ = "0.1.0"
