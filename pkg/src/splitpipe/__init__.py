"""Split CNN inference across a near-source accelerator and a GPU."""

__version__ = "0.1.0"
