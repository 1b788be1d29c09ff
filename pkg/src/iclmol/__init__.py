"""In-context molecular property regression: frequent-subgraph context
mining, a geometry-aware graph encoder, and a decoder-only sequence model
trained on interleaved (encoding, label) tokens."""

__version__ = "0.1.0"
