"""Conditional denoising diffusion with a jointly learned diagonal-Gaussian prior."""

import os

# OpenBLAS oversubscribes small GEMMs badly on few-core machines; the
# setting only takes effect if numpy has not been imported yet.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"
