"""Server-centric federated learning runtime with a small FL toolkit on top."""

__version__ = "0.1.0"
