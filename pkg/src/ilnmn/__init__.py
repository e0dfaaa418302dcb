"""Iterated learning for neural module networks on SHAPES-SyGeT."""

__version__ = "0.1.0"
