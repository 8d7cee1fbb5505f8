"""Kernel backend selection.

The compiled ``ramlab._kernels`` extension is used when it imports; otherwise
(or when ``RAMLAB_PURE_PYTHON=1``) the numpy implementations in
``ramlab._kernels_py`` are used.  Both expose the same functions over 2-D
row-major float64 arrays; the wrappers below fold leading axes into rows.
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import _kernels_py


def load_backend(name: str):
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("ramlab._kernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        load_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def _select():
    if os.environ.get("RAMLAB_PURE_PYTHON", "") not in ("", "0"):
        return "python", _kernels_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _kernels_py


BACKEND, _impl = _select()


def use_backend(name: str) -> None:
    """Switch the active backend (used by the benchmark and the parity tests)."""
    global BACKEND, _impl
    _impl = load_backend(name)
    BACKEND = name


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1, a.shape[-1])


def softmax_lastaxis(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        mask = np.ascontiguousarray(mask, dtype=np.uint8)
        if mask.shape[-1] != a.shape[-1] or mask.shape[0] != a.shape[-2]:
            raise ValueError(f"mask shape {mask.shape} does not match rows of {a.shape}")
    return _impl.softmax_rows(_rows(a), mask).reshape(a.shape)


def softmax_lastaxis_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _impl.softmax_rows_backward(_rows(y), _rows(g)).reshape(y.shape)


def layernorm_forward(x, gain, bias, eps):
    y, xhat, rstd = _impl.layernorm_forward(
        _rows(x), np.ascontiguousarray(gain, dtype=np.float64),
        np.ascontiguousarray(bias, dtype=np.float64), float(eps),
    )
    return y.reshape(x.shape), xhat, rstd


def layernorm_backward(g, xhat, rstd, gain):
    dx, dgain, dbias = _impl.layernorm_backward(
        _rows(g), xhat, rstd, np.ascontiguousarray(gain, dtype=np.float64)
    )
    return dx.reshape(g.shape), dgain, dbias


def gelu_forward(x):
    return _impl.gelu_forward(_rows(x)).reshape(x.shape)


def gelu_backward(x, g):
    return _impl.gelu_backward(_rows(x), _rows(g)).reshape(x.shape)


def saturate_forward(x):
    if x.ndim == 0:
        return _impl.saturate_forward(_rows(x.reshape(1, 1))).reshape(())
    return _impl.saturate_forward(_rows(x)).reshape(x.shape)


def saturate_backward(x, g):
    if x.ndim == 0:
        return _impl.saturate_backward(_rows(x.reshape(1, 1)), _rows(g.reshape(1, 1))).reshape(())
    return _impl.saturate_backward(_rows(x), _rows(g)).reshape(x.shape)
