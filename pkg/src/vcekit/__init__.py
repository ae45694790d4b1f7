"""Desk-scale diffusion counterfactuals with a quantitative evaluation harness."""

__version__ = "0.1.0"
