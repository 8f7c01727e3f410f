"""Speech-driven gesture diffusion on state-space (SSD / Mamba-2) backbones."""

import os

# DIM_THREADS caps BLAS worker threads; only effective before numpy is first imported
_threads = os.environ.get("DIM_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
