"""Mean-field stochastic maximum principle toolkit."""

__version__ = "0.1.0"
