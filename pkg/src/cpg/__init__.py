"""Catalog phrase grounding, desk-scale synthetic reproduction."""

__version__ = "0.1.0"
