"""Pin BLAS to one thread before numpy loads: timing checks and the
acceptance runtime budgets are stated for a single CPU core, and
single-threaded reductions keep results bit-reproducible."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
