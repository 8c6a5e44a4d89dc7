"""
MPX-based multi-domain SFI toolkit: instrumenter, verifier and sandbox runtime
"""

__version__ = "1.0.0"
