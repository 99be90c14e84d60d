"""Meta-learned adaptive trajectory-tracking control for planar rotorcraft."""

__version__ = "0.1.0"
