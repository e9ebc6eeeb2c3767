"""arvlab: desk-scale lab for accelerated autoregressive sequence training."""

__version__ = "0.1.0"
