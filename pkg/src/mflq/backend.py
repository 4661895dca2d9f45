"""Selection between the compiled and the pure-numpy stepping kernels.

The compiled kernel (``mflq._stepcore``, built from Cython at install
time) is preferred when it imported cleanly; the numpy fallback in
``mflq._steploop`` is always available.  The environment variable
``MFLQ_BACKEND`` forces one of them: ``c`` for the compiled kernel,
``py`` for the fallback.  It is consulted on every call, so tests can
flip it without reimporting.

Both kernels fulfil the contract documented in :mod:`mflq._steploop`;
they agree to floating-point roundoff, not bit for bit, because their
inner reductions associate differently.
"""

import os

from . import _steploop

try:
    from . import _stepcore
except ImportError:
    _stepcore = None

__all__ = ["ENV_VAR", "BackendError", "available", "selected", "step_chunk"]

ENV_VAR = "MFLQ_BACKEND"


class BackendError(RuntimeError):
    """Unknown backend name, or a forced backend that is not importable."""


def available():
    """Mapping of backend name to availability."""
    return {"py": True, "c": _stepcore is not None}


def selected(name=None):
    """Resolve the backend name that a call would use right now."""
    if name is None:
        name = os.environ.get(ENV_VAR, "").strip() or None
    if name is None:
        return "c" if _stepcore is not None else "py"
    if name not in ("c", "py"):
        raise BackendError("unknown backend %r (choose 'c' or 'py')" % name)
    if name == "c" and _stepcore is None:
        raise BackendError("compiled stepping kernel is not available")
    return name


def step_chunk(*args, name=None):
    """Dispatch one chunk advance to the selected kernel."""
    if selected(name) == "c":
        return _stepcore.step_chunk(*args)
    return _steploop.step_chunk(*args)
