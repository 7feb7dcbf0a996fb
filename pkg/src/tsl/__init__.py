"""Learning program semantics from execution traces."""

__version__ = "0.1.0"
