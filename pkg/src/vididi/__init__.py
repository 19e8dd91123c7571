"""Self-supervised video dynamics learning via temporal-derivative views."""

__version__ = "0.1.0"
