"""Subspace activation patching, the dormant-pathway illusion and rank-1 edit bridges on analyzable models."""

__version__ = "1.0.0"
