"""Sparse mixture-of-experts layers for small ResNets, with l-inf attacks,
adversarial training and routing diagnostics."""

__version__ = "0.1.0"
