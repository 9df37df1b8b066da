"""Dysarthric speech detection from temporal envelope and fine-structure cues."""

__version__ = "0.1.0"
