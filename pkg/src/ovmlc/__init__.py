"""Open-vocabulary multi-label video classification at desk scale."""

__version__ = "0.1.0"
