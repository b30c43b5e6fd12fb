"""Online simulation optimization with Markov-switching input models."""

__version__ = "0.1.0"
