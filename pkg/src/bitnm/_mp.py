"""Worker-process bootstrap. Must stay import-light (no numpy)."""

import os


def limit_worker_threads() -> None:
    """Pin BLAS pools to one thread; runs before numpy loads in the worker."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = "1"
