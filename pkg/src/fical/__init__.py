"""One-round federated tool learning: clients share knowledge compendiums instead of weights."""

__version__ = "0.1.0"
