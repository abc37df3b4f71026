"""ccnf: conformal joint prediction regions for multi-step forecasts."""

__version__ = "0.1.0"
