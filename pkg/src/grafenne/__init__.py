"""GRAFENNE: graph neural networks for heterogeneous and dynamic feature sets."""

__version__ = "0.1.0"
