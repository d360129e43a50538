"""Hot compression kernels: numba fast path with a pure-numpy fallback.

The numba path is used when importable unless the environment variable
``COMPSGD_NO_NUMBA`` is set to a non-empty value.  Both paths must produce
bit-identical output: the only reduction (the 2-norm) is computed by the
caller and passed in, and everything inside the kernels is elementwise IEEE
arithmetic evaluated in the same order.

Row-batched variants exist because the Monte-Carlo validation suite calls
the operators 1e5 times per configuration; one kernel call per chunk of
trials removes the per-call Python overhead.
"""
from __future__ import annotations

import os

import numpy as np


def _quantize_rows_np(v, norms, u, s):
    # v: (m, d) rows to quantize, norms: (m,) per-row 2-norms, u: (m, d)
    # uniforms, s: level count.  Rows with zero norm map to zero.
    safe = np.where(norms > 0.0, norms, 1.0)[:, None]
    ratio = np.abs(v) / safe
    scaled = s * ratio
    level = np.floor(scaled)
    frac = scaled - level
    xi = level + (u < frac)
    sign = np.sign(v)
    out = safe * sign * (xi / s)
    out[norms == 0.0, :] = 0.0
    return out


def _sparsify_rows_np(v, u, p):
    return np.where(u < p, v / p, 0.0)


def _quantize_vec_np(v, norm, u, s):
    ratio = np.abs(v) / norm
    scaled = s * ratio
    level = np.floor(scaled)
    frac = scaled - level
    xi = level + (u < frac)
    return norm * np.sign(v) * (xi / s)


def _sparsify_vec_np(v, u, p):
    return np.where(u < p, v / p, 0.0)


try:  # pragma: no cover - exercised via the selected backend
    from numba import njit

    @njit(cache=True)
    def _quantize_vec_nb(v, norm, u, s):
        d = v.shape[0]
        out = np.empty(d)
        for j in range(d):
            x = v[j]
            scaled = s * (abs(x) / norm)
            level = np.floor(scaled)
            frac = scaled - level
            if u[j] < frac:
                xi = level + 1.0
            else:
                xi = level
            if x > 0.0:
                sign = 1.0
            elif x < 0.0:
                sign = -1.0
            else:
                sign = 0.0
            out[j] = norm * sign * (xi / s)
        return out

    @njit(cache=True)
    def _sparsify_vec_nb(v, u, p):
        d = v.shape[0]
        out = np.empty(d)
        for j in range(d):
            if u[j] < p:
                out[j] = v[j] / p
            else:
                out[j] = 0.0
        return out

    @njit(cache=True)
    def _quantize_rows_nb(v, norms, u, s):
        m, d = v.shape
        out = np.empty((m, d))
        for i in range(m):
            norm = norms[i]
            if norm == 0.0:
                for j in range(d):
                    out[i, j] = 0.0
                continue
            for j in range(d):
                x = v[i, j]
                ax = abs(x)
                scaled = s * (ax / norm)
                level = np.floor(scaled)
                frac = scaled - level
                if u[i, j] < frac:
                    xi = level + 1.0
                else:
                    xi = level
                if x > 0.0:
                    sign = 1.0
                elif x < 0.0:
                    sign = -1.0
                else:
                    sign = 0.0
                out[i, j] = norm * sign * (xi / s)
        return out

    @njit(cache=True)
    def _sparsify_rows_nb(v, u, p):
        m, d = v.shape
        out = np.empty((m, d))
        for i in range(m):
            for j in range(d):
                if u[i, j] < p:
                    out[i, j] = v[i, j] / p
                else:
                    out[i, j] = 0.0
        return out

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def numba_available() -> bool:
    return _HAVE_NUMBA


def use_numba() -> bool:
    return _HAVE_NUMBA and not os.environ.get("COMPSGD_NO_NUMBA")


def backend_name() -> str:
    return "numba" if use_numba() else "numpy"


def quantize_rows(v: np.ndarray, norms: np.ndarray, u: np.ndarray,
                  s: int) -> np.ndarray:
    if use_numba():
        return _quantize_rows_nb(v, norms, u, float(s))
    return _quantize_rows_np(v, norms, u, float(s))


def sparsify_rows(v: np.ndarray, u: np.ndarray, p: float) -> np.ndarray:
    if use_numba():
        return _sparsify_rows_nb(v, u, p)
    return _sparsify_rows_np(v, u, p)


def quantize_vec(v: np.ndarray, norm: float, u: np.ndarray, s: int) -> np.ndarray:
    if use_numba():
        return _quantize_vec_nb(v, norm, u, float(s))
    return _quantize_vec_np(v, norm, u, float(s))


def sparsify_vec(v: np.ndarray, u: np.ndarray, p: float) -> np.ndarray:
    if use_numba():
        return _sparsify_vec_nb(v, u, p)
    return _sparsify_vec_np(v, u, p)
