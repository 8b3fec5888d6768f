"""Virtual-neighbor network for embedding unseen knowledge-graph entities."""

__version__ = "0.1.0"
