"""Moving-boundary Darcy filling simulation and ensemble Kalman inversion toolkit."""

__version__ = "0.1.0"
