"""Radar instance contrastive pre-training for range-Doppler object detectors."""

__version__ = "0.1.0"
