"""Outcome-reward policy-gradient simulator for group-composition reasoning tasks."""

__version__ = "0.1.0"
