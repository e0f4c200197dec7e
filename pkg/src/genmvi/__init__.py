"""Synthetic-to-generative myelin volume index (GenMVI) toolkit."""
__version__ = "0.1.0"
