"""Bandwidth-limited multi-agent communication with an information-bottleneck protocol."""

__version__ = "0.1.0"
