"""Prototype-based behavior-policy estimation for importance-sampling policy evaluation."""

__version__ = "0.1.0"
