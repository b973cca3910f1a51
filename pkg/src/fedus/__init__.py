"""FECG-to-Doppler-ultrasound beat generation with dilated causal convolutions."""

__version__ = "0.1.0"
