"""Optional numba acceleration.

Set ``SAR_DISABLE_NUMBA=1`` to force the pure-numpy paths (useful for
debugging and for comparing backends).
"""
import os

JIT_DISABLED = os.environ.get("SAR_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

if not JIT_DISABLED:
    try:
        import numba as nb
    except ImportError:  # pragma: no cover
        JIT_DISABLED = True


def njit(*args, **kwargs):
    if JIT_DISABLED:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda func: func
    return nb.njit(*args, **kwargs)
