"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise (or when
``APTDIFT_PURE_PYTHON=1``) the numpy fallback runs. Both produce identical
results for identical inputs.
"""

import os

from . import _fallback

BACKEND = "python"
if os.environ.get("APTDIFT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

rollout_batch = _impl.rollout_batch
value_batch = _impl.value_batch
matrix_game_lp = _impl.matrix_game_lp
sgd_epoch = _impl.sgd_epoch


def backend(name):
    """Kernel module by name (``"cython"`` or ``"python"``); for benchmarks and tests."""
    if name == "python":
        return _fallback
    from . import _kernels
    return _kernels
