"""Test-time adaptation for graph anomaly detection under normality shift."""

__version__ = "0.1.0"
