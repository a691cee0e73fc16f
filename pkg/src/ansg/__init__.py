"""Anisotropic 3D segmentation: kU-Net features refined by a deep bi-directional ConvLSTM."""

__version__ = "0.1.0"
