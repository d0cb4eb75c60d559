"""Teacher-student semi-supervised training with batch relation consistency, in numpy."""

__version__ = "0.1.0"
