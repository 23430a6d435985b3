"""Patch-based multi-horizon quantile forecasting with frozen pretrained transformer
backbones, plus heavy-tailed spectral diagnostics of the trained weights."""

__version__ = "0.1.0"
