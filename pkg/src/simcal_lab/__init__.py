"""SimCal Lab - long-tail classifier calibration on a synthetic frozen-feature surrogate."""

__version__ = "0.1.0"
