"""Continuous camera motion and a time-dependent neural SDF, learned jointly
from a monocular image sequence."""

__version__ = "0.1.0"
