"""Masked autoencoder pre-training with flow mixing for encrypted traffic classification."""

__version__ = "0.1.0"
