"""Argoverse to emp-scenario/1 converter."""

from avconvert.convert import ConversionError, ConversionManifest, convert, verify

__version__ = "0.1.0"

__all__ = ["ConversionError", "ConversionManifest", "convert", "verify"]
