"""Sensor-attack defenses built on actual-path consistency checks."""
__version__ = "0.1.0"
