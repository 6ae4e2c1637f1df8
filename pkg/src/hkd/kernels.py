"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension ``hkd._lstm_ext`` is used when it imports; setting
``HKD_PURE_PYTHON=1`` forces the numpy fallback.  Both expose
``recur_forward`` / ``recur_backward`` with identical contracts.
"""

import os

import numpy as np

from hkd import _lstm_py

BACKEND = "python"
_impl = _lstm_py

if os.environ.get("HKD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from hkd import _lstm_ext as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name: str) -> None:
    """Switch between ``"cython"`` and ``"python"`` at runtime (benchmarks, tests)."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _lstm_py, "python"
    elif name == "cython":
        from hkd import _lstm_ext

        _impl, BACKEND = _lstm_ext, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    import importlib.util

    return importlib.util.find_spec("hkd._lstm_ext") is not None


def lstm_forward(x, w_ih, w_hh, b):
    """x (B, T, D) -> h (B, T, H) with zero initial state.

    Weights: w_ih (D, 4H), w_hh (H, 4H), b (4H,).
    """
    if x.ndim != 3 or w_ih.shape[0] != x.shape[2] or w_ih.shape[1] != w_hh.shape[1] or w_hh.shape[1] != 4 * w_hh.shape[0] or b.shape != (w_hh.shape[1],):
        from hkd.autodiff import ShapeError

        raise ShapeError(
            f"lstm: incompatible shapes x={x.shape} w_ih={w_ih.shape} w_hh={w_hh.shape} b={b.shape}"
        )
    from hkd.autodiff import row_stable_matmul

    xp = np.ascontiguousarray(row_stable_matmul(x, w_ih) + b)
    w = np.ascontiguousarray(w_hh)
    h, c, gates, tanh_c = _impl.recur_forward(xp, w)
    return h, (c, gates, tanh_c, _impl)


def lstm_backward(gh, x, w_ih, w_hh, cache):
    c, gates, tanh_c, impl = cache
    dz = impl.recur_backward(np.ascontiguousarray(gh, dtype=x.dtype), np.ascontiguousarray(w_hh), c, gates, tanh_c)
    B, T, H = gh.shape
    D = x.shape[2]
    h = _hidden_from_cache(gates, tanh_c)
    h_prev = np.zeros_like(h)
    h_prev[:, 1:] = h[:, :-1]
    dz2 = dz.reshape(B * T, 4 * H)
    g_w_hh = h_prev.reshape(B * T, H).T @ dz2
    g_w_ih = x.reshape(B * T, D).T @ dz2
    g_b = dz2.sum(axis=0)
    g_x = dz @ w_ih.T
    return g_x, g_w_ih, g_w_hh, g_b


def _hidden_from_cache(gates, tanh_c):
    H = tanh_c.shape[2]
    return gates[:, :, 3 * H :] * tanh_c
