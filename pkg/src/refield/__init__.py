"""Monocular face reflectance fields at desk scale."""

import warnings

# numba probes an outdated system TBB and falls back to another threading layer
warnings.filterwarnings("ignore", message="The TBB threading layer")

__version__ = "0.1.0"
