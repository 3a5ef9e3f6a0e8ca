"""Test package for SimCal Lab."""
