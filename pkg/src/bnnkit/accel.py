"""Backend selection for the hot kernels.

Every kernel in :mod:`bnnkit.kernels` ships in two builds: a numba
``@njit`` build and a pure-numpy build. The numba build is used when numba
imports cleanly and the environment does not opt out. Set
``BNNKIT_NO_NUMBA=1`` to force the numpy path (useful for debugging and
for the ``bnnkit bench`` backend comparison).
"""

import os


def numba_requested() -> bool:
    """True unless the environment opts out via BNNKIT_NO_NUMBA."""
    return os.environ.get("BNNKIT_NO_NUMBA", "").strip() in ("", "0")


def _detect() -> bool:
    if not numba_requested():
        return False
    try:
        import numba  # noqa: F401
    except Exception:
        return False
    return True


NUMBA_ENABLED = _detect()
BACKEND = "numba" if NUMBA_ENABLED else "numpy"
