"""Zero-shot 6D pose hypothesis generation, scoring, and evaluation."""

__version__ = "0.1.0"
