"""Backend selection for the hot kernels.

``HERALDMIS_BACKEND=numba`` (the default when numba imports) compiles the
kernels with ``@njit``; ``HERALDMIS_BACKEND=numpy`` runs the same kernel
sources under the interpreter and swaps the collision resolver for a
vectorised numpy implementation. Both backends produce bit-identical runs.
"""

import logging
import os

logger = logging.getLogger(__name__)

_requested = os.environ.get("HERALDMIS_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"HERALDMIS_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested != "numba":
        raise ImportError
    import numba

    def njit(func=None, **kwargs):
        kwargs.setdefault("cache", True)
        if func is None:
            return lambda f: numba.njit(**kwargs)(f)
        return numba.njit(**kwargs)(func)

    BACKEND = "numba"
except ImportError:
    if _requested == "numba":
        logger.warning("numba unavailable, falling back to the numpy backend")

    def njit(func=None, **kwargs):
        def wrap(f):
            return f

        return wrap if func is None else wrap(func)

    BACKEND = "numpy"
