"""Looped weight-tied transformers on grid tasks.

Training regimes (recursive supervision, denoising recursion, state
perturbation, one-step masked diffusion), generate-and-remask inference,
and augmentation voting, all on a small numpy-backed autodiff core.
"""

import os

# Thread pinning must happen before numpy initialises its BLAS backend.
_threads = os.environ.get("LOOPFORGE_THREADS")
if _threads is not None:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

__version__ = "0.1.0"
