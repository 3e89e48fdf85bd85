"""Generalization gaps of manifold-sampled graph neural networks under model mismatch."""

__version__ = "0.1.0"
