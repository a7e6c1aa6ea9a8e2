"""Desk-scale GAN spoofing attacks against a CNN speaker recognizer."""

__version__ = "0.1.0"
