"""Two-lane interchange lane-swap simulation with decentralized CBF safety filters."""

__version__ = "0.1.0"
