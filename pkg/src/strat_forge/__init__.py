"""Build a library of code-optimization strategies from commit history and apply it."""

__version__ = "0.1.0"
