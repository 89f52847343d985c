"""Hierarchical deep loss classifier with a numpy autodiff core."""

__version__ = "0.1.0"
