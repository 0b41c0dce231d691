"""Chart question answering with a two-stream co-attention transformer, on synthetic charts."""

__version__ = "0.1.0"
