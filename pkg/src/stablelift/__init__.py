"""Stable limit laws for heavy-tailed Birkhoff sums on doubling and LSV maps."""
__version__ = "0.1.0"
