"""Masked predictive coding pre-training for Transformer speech encoders,
with APC/CPC baselines and a joint attention/CTC character recognizer."""

__version__ = "0.1.0"
