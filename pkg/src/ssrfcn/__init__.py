"""Live/spoof face classifier built on a fully convolutional score-map network."""

__version__ = "0.1.0"
