"""Functional, noise-aware simulator for an analog crossbar + ACAM dot-product engine."""

from nldpe.codes import CodeWord, Encoding, QuantSpec, dequantize, quantize

__all__ = ["CodeWord", "Encoding", "QuantSpec", "dequantize", "quantize"]
__version__ = "0.1.0"
