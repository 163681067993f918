"""JIT shim: numba-accelerated kernels with a pure-python/numpy fallback.

Set the environment variable ``CAPFLOW_NO_NUMBA=1`` to force the fallback
path (useful on platforms without numba, and for benchmarking the kernels
against their interpreted versions, see benchmarks/bench_kernels.py).
"""

import os

USE_NUMBA = os.environ.get("CAPFLOW_NO_NUMBA", "0") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        USE_NUMBA = False

if USE_NUMBA:
    def maybe_jit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return njit(*args, **kwargs)
else:
    def maybe_jit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap
