"""Memory-augmented entity tracking trained from sparse coreference labels."""

__version__ = "0.1.0"
