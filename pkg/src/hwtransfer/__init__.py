"""Transfer learning for hot-water tank dynamics models, on a simulated household corpus."""

__version__ = "0.1.0"
