"""One fusion transformer, one masked-language-modeling head, every video-text task."""

__version__ = "0.1.0"
