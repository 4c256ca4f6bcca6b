"""Per-query selection among optimized agent-graph structures."""

__version__ = "0.1.0"
