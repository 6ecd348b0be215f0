"""Variational prefix tuning laboratory: backbone, latent prefixes, decoding, selection, metrics."""

__version__ = "0.1.0"
