"""Postselected weak values of continuously monitored open quantum systems."""

__version__ = "0.1.0"
