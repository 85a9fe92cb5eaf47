"""Contrastive AU representation learning: temporal triplets, cross-identity
reconstruction against a momentum queue, and linear-probe evaluation."""

__version__ = "0.1.0"
