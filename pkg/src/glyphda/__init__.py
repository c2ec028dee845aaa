"""Domain adaptation by disentangling images into structure and texture codes."""

__version__ = "0.1.0"
