"""Passive LTE timing-advance localization and identity tracking toolkit.

The package simulates an eNodeB, UEs and a pair of passive sniffers, then
runs the measurement side: timing-advance quantization accounting, ellipse
and annulus geometry, uplink message decoding, identity extraction and
long-lived device tracking.
"""

__version__ = "0.1.0"
