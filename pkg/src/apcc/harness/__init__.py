"""Calibration, Monte Carlo experiments and the command line interface."""
