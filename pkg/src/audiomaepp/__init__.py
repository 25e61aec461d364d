"""Desk-scale AudioMAE++ in numpy: log-mel frontend, masked autoencoder with
macaron SwiGLU transformer blocks, pretraining loop and frozen-feature probes."""

__version__ = "0.1.0"
