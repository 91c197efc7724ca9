"""Dual-branch convolutional network for motor-imagery EEG decoding."""

__version__ = "0.1.0"
