"""Model-health monitoring with a two-stage deep anomaly detector."""

__version__ = "0.1.0"
