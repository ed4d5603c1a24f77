"""protodensity: prototype-based interpretable density-map cell counting.

A desk-scale stack for counting cells in fluorescence-microscopy-like images
by density map estimation, built around a small set of learnable prototypes
whose similarity maps both drive the count and explain it.
"""

__version__ = "0.1.0"
