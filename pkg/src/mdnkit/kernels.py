"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``MDNKIT_KERNELS=python`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MDNKIT_KERNELS", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def backends() -> dict:
    """Every importable backend, keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
        out["compiled"] = _compiled
    except ImportError:
        pass
    return out


def use(name: str) -> None:
    """Switch backend at runtime (used by the benchmark and cross-backend tests)."""
    global _impl, BACKEND
    _impl = backends()[name]
    BACKEND = name


def mdn_nll(*args, **kwargs):
    return _impl.mdn_nll(*args, **kwargs)


def mmd_terms(*args, **kwargs):
    return _impl.mmd_terms(*args, **kwargs)


def rbf_sums(A, B, scales, same):
    return _impl.rbf_sums(A, B, scales, same)


def euler_saddle(*args, **kwargs):
    return _impl.euler_saddle(*args, **kwargs)


def euler_gravity(*args, **kwargs):
    return _impl.euler_gravity(*args, **kwargs)


def dopri5_lorenz(*args, **kwargs):
    return _impl.dopri5_lorenz(*args, **kwargs)


def gru_forward(*args, **kwargs):
    return _impl.gru_forward(*args, **kwargs)


def gru_backward(*args, **kwargs):
    return _impl.gru_backward(*args, **kwargs)


def adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd):
    """In-place on flat contiguous arrays."""
    return _impl.adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd)


def gelu_fwd(x):
    return _impl.gelu_fwd(x)


def gelu_bwd(x, cdf, g):
    return _impl.gelu_bwd(x, cdf, g)
