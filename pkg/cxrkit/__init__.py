"""Chest X-ray preprocessing, class-imbalance handling, residual CNN training and explanations."""

__version__ = "0.1.0"
