"""Numerical key rates for QPSK heterodyne CV-QKD and TPE-designed neural surrogates."""

__version__ = "0.1.0"
