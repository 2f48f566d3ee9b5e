"""Three-branch video action recognition with cross-branch fusion and a
knowledge graph over pooled segment features."""

__version__ = "0.1.0"
