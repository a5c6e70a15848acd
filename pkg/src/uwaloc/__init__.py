"""Underwater acoustic source ranging with CNNs, MFP and test-time adaptation."""

__version__ = "0.1.0"
