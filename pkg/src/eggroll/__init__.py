"""Low-rank evolution strategies for matrix parameters, with an integer-only language model trained by the same method."""

__version__ = "0.1.0"
