"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``HEARTCAST_NUMBA`` is set to ``0``.  Both paths compute the same
sums; they differ only in summation order, so results agree to rounding.

Spatio-temporal convolution layout::

    u    [B, S_in, H, T]       feature-combined encoder input
    w    [H, S_out, S_in, K]   one kernel per (latent channel, output station)
    out  [B, S_out, H, T]

    out[b, s, h, t] = sum_{p, k} w[h, s, p, k] * u[b, p, h, t + k - pad_left]

with zeros outside ``0 <= t + k - pad_left < T`` ("same" padding).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None


def _numba_requested() -> bool:
    return os.environ.get("HEARTCAST_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def same_padding(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


# -- numpy ------------------------------------------------------------------

def _stconv_forward_numpy(u, w, pad_left):
    b, s_in, h, t = u.shape
    _, s_out, _, k = w.shape
    dt = np.result_type(u, w)
    up = np.zeros((h, s_in, b, t + k - 1), dtype=dt)
    up[..., pad_left:pad_left + t] = u.transpose(2, 1, 0, 3)
    out = np.zeros((h, s_out, b * t), dtype=dt)
    for j in range(k):
        out += np.matmul(w[..., j], up[..., j:j + t].reshape(h, s_in, b * t))
    return out.reshape(h, s_out, b, t).transpose(2, 1, 0, 3)


def _stconv_backward_numpy(g, u, w, pad_left):
    b, s_in, h, t = u.shape
    _, s_out, _, k = w.shape
    dt = np.result_type(g, u, w)
    up = np.zeros((h, s_in, b, t + k - 1), dtype=dt)
    up[..., pad_left:pad_left + t] = u.transpose(2, 1, 0, 3)
    gh = g.transpose(2, 1, 0, 3).reshape(h, s_out, b * t)
    gup = np.zeros((h, s_in, b, t + k - 1), dtype=dt)
    gw = np.empty(w.shape, dtype=dt)
    for j in range(k):
        win = up[..., j:j + t].reshape(h, s_in, b * t)
        gw[..., j] = np.matmul(gh, win.transpose(0, 2, 1))
        gup[..., j:j + t] += np.matmul(w[..., j].transpose(0, 2, 1), gh).reshape(h, s_in, b, t)
    gu = gup[..., pad_left:pad_left + t].transpose(2, 1, 0, 3)
    return np.ascontiguousarray(gu), gw


# -- numba ------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _stconv_forward_numba(u, w, pad_left):
        nb, s_in, nh, nt = u.shape
        s_out = w.shape[1]
        nk = w.shape[3]
        out = np.zeros((nb, s_out, nh, nt))
        for b in range(nb):
            for s in range(s_out):
                for h in range(nh):
                    for p in range(s_in):
                        for k in range(nk):
                            wk = w[h, s, p, k]
                            shift = k - pad_left
                            lo = max(0, -shift)
                            hi = min(nt, nt - shift)
                            for t in range(lo, hi):
                                out[b, s, h, t] += wk * u[b, p, h, t + shift]
        return out

    @numba.njit(cache=True)
    def _stconv_backward_numba(g, u, w, pad_left):
        nb, s_in, nh, nt = u.shape
        s_out = w.shape[1]
        nk = w.shape[3]
        gu = np.zeros_like(u)
        gw = np.zeros_like(w)
        for b in range(nb):
            for s in range(s_out):
                for h in range(nh):
                    for p in range(s_in):
                        for k in range(nk):
                            wk = w[h, s, p, k]
                            shift = k - pad_left
                            lo = max(0, -shift)
                            hi = min(nt, nt - shift)
                            acc = 0.0
                            for t in range(lo, hi):
                                gbt = g[b, s, h, t]
                                acc += gbt * u[b, p, h, t + shift]
                                gu[b, p, h, t + shift] += wk * gbt
                            gw[h, s, p, k] += acc
        return gu, gw

else:  # pragma: no cover
    _stconv_forward_numba = None
    _stconv_backward_numba = None


NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"

IMPLEMENTATIONS = {"numpy": (_stconv_forward_numpy, _stconv_backward_numpy)}
if NUMBA_AVAILABLE:
    IMPLEMENTATIONS["numba"] = (_stconv_forward_numba, _stconv_backward_numba)


def _impl(backend, *arrays):
    # the numba kernels are compiled for float64 only
    if backend is None and any(a.dtype != np.float64 for a in arrays):
        backend = "numpy"
    name = backend or BACKEND
    try:
        return IMPLEMENTATIONS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {sorted(IMPLEMENTATIONS)}") from None


def stconv_forward(u: np.ndarray, w: np.ndarray, pad_left: int, backend: str | None = None) -> np.ndarray:
    fwd, _ = _impl(backend, u, w)
    return fwd(np.ascontiguousarray(u), np.ascontiguousarray(w), pad_left)


def stconv_backward(g: np.ndarray, u: np.ndarray, w: np.ndarray, pad_left: int,
                    backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    _, bwd = _impl(backend, g, u, w)
    return bwd(np.ascontiguousarray(g), np.ascontiguousarray(u), np.ascontiguousarray(w), pad_left)
