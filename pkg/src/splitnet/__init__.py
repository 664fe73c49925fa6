"""Divide one wide network into S thin ones and co-train them as an ensemble."""

__version__ = "0.1.0"
