"""Cascaded post-processing correction of MJO forecasts: a 3-D U-Net on anomaly fields
followed by an LSTM on the RMM index, with verification and attribution tools."""

__version__ = "0.1.0"
