"""
MoCaE Toolkit
=============
Calibrate object detectors against IoU, fuse them as a mixture of
calibrated experts and evaluate accuracy and localisation-aware calibration.
"""

__version__ = "0.1.0"
