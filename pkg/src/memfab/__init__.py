"""Membership inference audits, fabricated-member attacks and the matching defenses."""

from .config import __version__

__all__ = ["__version__"]
