"""Age-agnostic speaker verification on a synthetic two-domain corpus."""

__version__ = "0.1.0"
