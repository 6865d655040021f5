"""Micro-expression recognition with a 3D residual backbone and an AU co-occurrence GCN."""

__version__ = "0.1.0"
