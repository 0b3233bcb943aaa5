"""Clifford+T circuit synthesis with a learned state-value network."""

__version__ = "0.1.0"
