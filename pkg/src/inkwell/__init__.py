"""Model-based fault detection and data-driven fault isolation for inkjet channels."""

__version__ = "0.1.0"
