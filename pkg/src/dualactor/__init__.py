"""Dual-prior annotation and dual-actor policy learning on a CPU toy manipulation suite."""

__version__ = "0.1.0"
