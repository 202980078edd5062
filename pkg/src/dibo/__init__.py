"""Diffusion-prior black-box optimization (DiBO) library and benchmark CLI."""

import os as _os
import sys as _sys

__version__ = "0.1.0"


def _cap_blas_threads():
    # DIBO_THREADS caps intra-run parallelism; must land before numpy loads.
    n = _os.environ.get("DIBO_THREADS")
    if n and "numpy" not in _sys.modules:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            _os.environ.setdefault(var, n)


_cap_blas_threads()
