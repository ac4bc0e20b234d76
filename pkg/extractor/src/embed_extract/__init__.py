"""Embedding export: turn image folders or caption lists into index files.

Output is the retrieval engine's binary vector format plus a JSONL metadata
sidecar, bit-exact, so every export can be ingested directly.
"""

__version__ = "0.1.0"


class ExportError(Exception):
    """Bad input set: nothing exportable, duplicate ids, unknown model."""


class ModelLoadError(Exception):
    """The requested embedding model cannot be loaded; the export aborts."""
