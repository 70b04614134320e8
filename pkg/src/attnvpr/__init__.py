"""Two-stage visual place recognition: multi-level attention global
descriptors for retrieval, key-patch matching for geometric re-ranking."""

__version__ = "0.1.0"
