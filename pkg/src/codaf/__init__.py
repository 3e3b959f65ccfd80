"""Two-stream RGB-infrared detector with learned feature alignment and gated fusion."""

__version__ = "0.1.0"
