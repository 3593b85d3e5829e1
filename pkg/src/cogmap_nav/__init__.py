"""Object-goal navigation with a cognitive map and a five-state decision machine."""

__version__ = "0.1.0"
