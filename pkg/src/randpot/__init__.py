"""randpot: classical motion in random potentials."""

__version__ = "0.1.0"
