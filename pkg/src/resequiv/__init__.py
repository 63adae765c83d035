"""Simplified plain/residual network laboratory."""
