"""Caption decoding with dual (spatial + channel) attention over pyramid feature maps."""

__version__ = "0.1.0"
