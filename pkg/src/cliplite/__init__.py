"""Single-negative contrastive image-text learning at desk scale."""

__version__ = "0.1.0"
