"""Numerical toolkit for nonlinear Hodge and Hodge-Frobenius systems on flat boxes."""

import os as _os

# HF_THREADS caps BLAS/OpenMP threads; it must be applied before numpy loads.
_threads = _os.environ.get("HF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .backlund import *  # noqa: E402,F401,F403
from .bvp import *  # noqa: E402,F401,F403
from .construct import *  # noqa: E402,F401,F403
from .density import *  # noqa: E402,F401,F403
from .errors import *  # noqa: E402,F401,F403
from .expr import *  # noqa: E402,F401,F403
from .forms import *  # noqa: E402,F401,F403

__version__ = "0.1.0"
