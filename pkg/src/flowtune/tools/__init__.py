"""Analysis, optimization, agglomeration and retrieval toolboxes."""

from . import agglom, inspect, optimize, retrieval

__all__ = ["agglom", "inspect", "optimize", "retrieval"]
