"""Volumetric CT classification with two-view contrastive training and hybrid mixing."""

__version__ = "0.1.0"
