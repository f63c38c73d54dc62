"""Knowledge transfer between attention-based MIL classifiers."""

__version__ = "0.1.0"
