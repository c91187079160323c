"""Backprop-free layer-local similarity learning (triplet / tuplet / representative)
with Forward-Forward and backpropagation baselines."""

__version__ = "0.1.0"
