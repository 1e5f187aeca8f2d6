"""Dataset-conditioned neural equation generation with GP refinement for symbolic regression."""

__version__ = "0.1.0"
