"""LookWhere at desk scale: a low-res selector picks where, a sparse extractor computes what.

Kept import-light so the command-line entry point can pin BLAS thread counts
before numpy loads.
"""

__version__ = "0.1.0"
