"""GNSS-free hierarchical map-matching localisation with a synthetic benchmark."""

__version__ = "0.1.0"
