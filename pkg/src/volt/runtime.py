"""Numeric-mode switches shared across the package.

Training defaults to float32. Setting the environment variable
``VOLT_DETERMINISTIC=1`` (or calling `set_deterministic(True)`) switches
every freshly created parameter and feature buffer to float64, which is
the mode used for gradient checks and bitwise-reproducibility tests.
"""

import os

import numpy as np

_forced = None


def set_deterministic(enabled):
    """Force deterministic 64-bit mode on/off, overriding the environment."""
    global _forced
    _forced = None if enabled is None else bool(enabled)


def deterministic():
    if _forced is not None:
        return _forced
    return os.environ.get("VOLT_DETERMINISTIC", "0") == "1"


def default_dtype():
    return np.float64 if deterministic() else np.float32
