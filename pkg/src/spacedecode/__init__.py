# coding: utf-8
"""
Semi-autoregressive fine-tuning and auto-correct (generate-and-verify) decoding for a toy causal transformer.
"""

__version__ = "0.3.0"
