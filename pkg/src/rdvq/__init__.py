"""Rate-distortion optimized vector-quantized image compression at desk scale."""

__version__ = "0.1.0"
