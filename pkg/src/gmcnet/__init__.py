"""Partial-to-partial rigid point-cloud registration with rotation-invariant graph descriptors."""

__version__ = "0.1.0"
