"""Air-quality forecasting with a convolutional encoder-decoder and attention variants."""

__version__ = "0.1.0"
