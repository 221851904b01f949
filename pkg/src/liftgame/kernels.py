"""Backend selection for the hot loops (ADMM iterations, Lemke-Howson pivoting).

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is used. Set ``LIFTGAME_PURE_PYTHON=1``
to force the fallback.
"""
import os

from . import _pykernels as python_backend
from ._pykernels import ADMM_INFEASIBLE, ADMM_RUNNING, ADMM_SOLVED, PivotLimitError

try:
    if os.environ.get("LIFTGAME_PURE_PYTHON", "").strip() not in ("", "0"):
        raise ImportError("pure-Python kernels requested")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

admm = backend.admm
lemke_howson = backend.lemke_howson

__all__ = [
    "ADMM_INFEASIBLE",
    "ADMM_RUNNING",
    "ADMM_SOLVED",
    "BACKEND",
    "PivotLimitError",
    "admm",
    "compiled_backend",
    "lemke_howson",
    "python_backend",
]
