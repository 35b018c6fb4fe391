"""Inference endpoint clients."""
