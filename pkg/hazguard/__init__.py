"""Detection-guided construction hazard assessment."""

__version__ = "0.1.0"
