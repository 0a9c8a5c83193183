"""Dual-direction transformer translation with past/future capsule supervision.

Two direction-reversed translation models are trained jointly: each model's
per-step capsule summaries of "what has been translated" and "what remains"
are pulled toward reference summaries extracted from the other model's
encoder. The package ships its own small reverse-mode autodiff engine, a
training/evaluation CLI, and an HTTP service for serving checkpoints.
"""

import os

# Pin BLAS thread pools before numpy is imported anywhere. Multi-threaded
# reductions reorder float sums and break run-to-run reproducibility, which
# the training log and checkpoint tests rely on.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
