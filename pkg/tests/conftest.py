"""Pin BLAS to one thread before numpy loads anywhere in the test run.

Threaded BLAS kernels may pick different split points for the same call
depending on machine load, which would break the bitwise reproducibility
the determinism tests assert.  setdefault keeps any explicit user override.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
