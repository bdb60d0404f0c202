"""Offline caption embedding exporter for the audio captioning toolkit."""

__version__ = "0.1.0"
