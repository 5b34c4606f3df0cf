"""Tradespace exploration toolkit for spacecraft rendezvous trajectory design."""

__version__ = "0.1.0"
