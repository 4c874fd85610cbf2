"""Dispatch QP kernel with compiled core and pure-NumPy fallback.

The compiled extension is selected automatically at import when present.
Set FLEXCOORD_KERNEL=py or FLEXCOORD_KERNEL=cy to force one twin (the
benchmark in benchmarks/bench_kernel.py compares them).
"""

import os

from .problem import KernelProblem
from ._kernel_py import KernelError
from ._kernel_py import solve_kernel as _solve_py

try:
    from ._kernel_cy import solve_kernel as _solve_cy
except ImportError:
    _solve_cy = None

_choice = os.environ.get("FLEXCOORD_KERNEL", "auto")
if _choice == "py":
    solve_kernel = _solve_py
elif _choice == "cy":
    if _solve_cy is None:
        raise ImportError("FLEXCOORD_KERNEL=cy but the compiled kernel is not built")
    solve_kernel = _solve_cy
else:
    solve_kernel = _solve_cy if _solve_cy is not None else _solve_py

KERNEL_BACKEND = "cy" if solve_kernel is _solve_cy else "py"

__all__ = ["KernelProblem", "KernelError", "solve_kernel", "KERNEL_BACKEND"]
