"""Anytime-reliable coding and stabilization of unstable vector plants over erasure channels."""

__version__ = "0.1.0"
