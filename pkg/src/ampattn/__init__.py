"""Focus/calibration multi-head self-attention for speech emotion recognition."""

__version__ = "0.1.0"
