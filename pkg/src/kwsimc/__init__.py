"""Bit-accurate simulator of a binarized keyword-spotting accelerator with
in-SRAM computing and fixed-point on-chip customization."""

__version__ = "0.1.0"
