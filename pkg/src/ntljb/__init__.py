"""Jailbreaking non-transferable classifiers through test-time data disguising.

The package trains desk-scale victims with a non-transferable barrier, seals
them behind a logits-only oracle, and trains a bidirectional disguising
network that maps unauthorized images into the authorized domain.
"""

__version__ = "0.1.0"
