"""Non-autoregressive end-to-end speech translation with dual decoders on a shared encoder."""

__version__ = "0.1.0"
