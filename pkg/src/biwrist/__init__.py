"""Bilateral wrist IMU screening pipeline."""

__version__ = "0.1.0"
