"""Hot-kernel dispatch: the compiled extension when importable, else numpy/Python.

``BACKEND`` names the implementation picked at import. ``use_backend`` swaps it
at runtime (tests and the benchmark compare both).
"""

from pdcap import _pykernels

try:
    from pdcap import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_IMPLS = {"python": _pykernels}
if _ckernels is not None:
    _IMPLS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None else "python"
_impl = _IMPLS[BACKEND]


def available_backends():
    return sorted(_IMPLS)


def use_backend(name):
    """Select ``"python"`` or ``"cython"``; returns the previous backend name."""
    global BACKEND, _impl
    if name not in _IMPLS:
        raise ValueError(f"kernel backend {name!r} unavailable (have {available_backends()})")
    prev = BACKEND
    BACKEND, _impl = name, _IMPLS[name]
    return prev


def avg_pool2d(grid, bin):
    return _impl.avg_pool2d(grid, bin)


def lcs_length(a, b):
    return _impl.lcs_length(a, b)
