"""Masked-discriminator unpaired image-to-image translation on a numpy autodiff core."""

__version__ = "0.1.0"
