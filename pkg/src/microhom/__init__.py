"""Two-scale numerics for high-contrast perforated magnetic composites."""
__version__ = "0.1.0"
