"""Audio captioning toolkit: log-mel features, a GRU encoder-decoder trained
with a combined word/sentence objective, and multi-reference caption metrics."""

__version__ = "0.1.0"
