"""Quadrotor backflip synthesis: feedforward primitives and planned, GP-compensated geometric tracking."""

__version__ = "0.1.0"
