"""Voice-conversion anonymization toolkit with perception-informed training."""

__version__ = "0.1.0"
