"""Per-user personalization datasets, n-gram LMs and shallow-fusion decoding."""

__version__ = "0.1.0"
