"""Parallel optimal transportation meshfree (OTM) solver."""
import os as _os

# vectorised SVML math would make results depend on loop position
_os.environ.setdefault("NUMBA_DISABLE_INTEL_SVML", "1")

__version__ = "0.1.0"
