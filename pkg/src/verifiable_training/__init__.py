"""Verifiable training platform: attested training jobs with signed AIBOMs."""

__version__ = "0.1.0"

from . import attestation as _attestation  # noqa: E402,F401  registers the link schema
from . import aibom as _aibom  # noqa: E402,F401  registers the AIBOM schema
