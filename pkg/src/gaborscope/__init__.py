"""Interpretable sleep staging with trainable Gabor kernels on EEG and EOG."""

__version__ = "0.1.0"
