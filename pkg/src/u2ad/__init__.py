"""Uncertainty-guided masked-reconstruction anomaly detection on spinal-cord phantoms."""

__version__ = "0.1.0"
