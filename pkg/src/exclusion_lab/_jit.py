"""Best-effort compilation of user callables for the numba kernels."""
import logging

import numba
from numba.core.registry import CPUDispatcher

log = logging.getLogger(__name__)


def maybe_njit(fn, probe=(0.0,)):
    """Return a jitted version of ``fn`` if numba can compile it, else ``fn``."""
    if fn is None or isinstance(fn, CPUDispatcher):
        return fn
    try:
        jitted = numba.njit(fn)
        jitted(*probe)
    except Exception as exc:  # numba raises a zoo of typing errors
        log.debug("could not jit %r: %s", fn, exc)
        return fn
    return jitted


def is_jitted(fn) -> bool:
    return isinstance(fn, CPUDispatcher)
