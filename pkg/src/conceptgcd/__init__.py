"""Three-stage concept learning for generalized category discovery on feature vectors."""

__version__ = "0.1.0"
