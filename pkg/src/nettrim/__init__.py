"""Convex post-training pruning of ReLU networks (Net-Trim) and supporting experiments."""

__version__ = "0.1.0"
