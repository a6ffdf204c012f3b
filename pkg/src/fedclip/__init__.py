"""Deterministic simulator and analysis toolkit for clipped and
differentially private federated averaging."""

__version__ = "0.1.0"
