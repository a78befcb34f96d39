"""Multi-style generative reading comprehension at desk scale."""

__version__ = "0.1.0"
