"""Generative planning from vector driving scenes with group-wise vision-language alignment."""

__version__ = "0.1.0"
