"""Select the search kernel implementation at import time.

The compiled extension is preferred; set ``UNIQCAP_BACKEND=python`` to force
the numpy fallback.
"""
import os

from . import _fallback

BACKENDS = {"python": _fallback.search_clips}

try:
    from ._kernels import search_clips as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    BACKENDS["compiled"] = _compiled

_requested = os.environ.get("UNIQCAP_BACKEND", "").strip().lower()
if _requested == "python" or _compiled is None:
    DEFAULT = "python"
else:
    DEFAULT = "compiled"


def get(name=None):
    name = name or DEFAULT
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"search backend {name!r} unavailable (have: {', '.join(sorted(BACKENDS))})"
        ) from None
