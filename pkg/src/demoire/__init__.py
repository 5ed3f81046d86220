"""Moire removal for camera-captured screen images: data synthesis, two-scale
networks on a small numpy autodiff core, GAN retraining and evaluation."""

__version__ = "0.1.0"
