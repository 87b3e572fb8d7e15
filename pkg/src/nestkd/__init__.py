"""Multi-teacher distillation into a ViT with nested embeddings."""

__version__ = "0.1.0"
