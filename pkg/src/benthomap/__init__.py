"""Self-supervised structure-from-motion and semantic seafloor mapping."""

__version__ = "0.1.0"
