"""Feature-space conformal prediction on split neural networks."""

__version__ = "0.1.0"
