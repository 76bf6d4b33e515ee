"""Data-flow benchmark for binary static analysis on a small x86-64 subset."""

__version__ = "0.1.0"
