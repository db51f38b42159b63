"""CTC-based non-autoregressive transduction with reordering analysis tools."""

__version__ = "0.1.0"
