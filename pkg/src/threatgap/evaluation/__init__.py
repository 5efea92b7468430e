"""Synthetic scenarios, the held-out recovery protocol, and evaluation metrics."""
