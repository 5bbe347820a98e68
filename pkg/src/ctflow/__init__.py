"""ctflow: discretized continuous-time flows for sampling, amortized
inference, and energy-based density estimation, with oracle-backed
convergence diagnostics and an experiment CLI."""

__version__ = "0.1.0"
