"""Model merging with layer-wise magnitude calibration."""

__version__ = "0.1.0"
