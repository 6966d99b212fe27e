"""cir-export: produce cirkit-format embeddings, captions, and annotations."""

__version__ = "0.1.0"
