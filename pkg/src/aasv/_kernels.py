"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``AASV_NUMBA`` is not
set to ``0``.  Both paths are kept bit-compatible where the arithmetic allows
(the unfold/fold kernels sum in the same order); the resonator differs from
``scipy.signal.lfilter`` only in the last few ulps.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.signal import lfilter

JIT_OPTIONS = {"nogil": True, "cache": True}


def _numba_requested() -> bool:
    return os.environ.get("AASV_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by AASV_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def unfold1d_numpy(x: np.ndarray, width: int, dilation: int) -> np.ndarray:
    """(B, C, T) -> (B, T, C * width) columns for a same-padded dilated conv."""
    b, c, t = x.shape
    pad = dilation * (width - 1) // 2
    xp = np.zeros((b, c, t + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + t] = x
    cols = np.empty((b, t, c, width), dtype=x.dtype)
    for j in range(width):
        cols[:, :, :, j] = xp[:, :, j * dilation : j * dilation + t].transpose(0, 2, 1)
    return cols.reshape(b, t, c * width)


def fold1d_numpy(cols: np.ndarray, channels: int, width: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`unfold1d_numpy`: scatter-add columns back to (B, C, T)."""
    b, t, _ = cols.shape
    pad = dilation * (width - 1) // 2
    c4 = cols.reshape(b, t, channels, width)
    xp = np.zeros((b, channels, t + 2 * pad), dtype=cols.dtype)
    for j in range(width):
        xp[:, :, j * dilation : j * dilation + t] += c4[:, :, :, j].transpose(0, 2, 1)
    return xp[:, :, pad : pad + t].copy()


def resonator_coeffs(freq: float, bandwidth: float, sample_rate: int) -> tuple[float, float, float]:
    """Unity-DC-gain two-pole resonator (gain, a1, a2)."""
    r = np.exp(-np.pi * bandwidth / sample_rate)
    a1 = -2.0 * r * np.cos(2.0 * np.pi * freq / sample_rate)
    a2 = r * r
    gain = 1.0 + a1 + a2
    return float(gain), float(a1), float(a2)


def resonate_numpy(x: np.ndarray, freq: float, bandwidth: float, sample_rate: int) -> np.ndarray:
    gain, a1, a2 = resonator_coeffs(freq, bandwidth, sample_rate)
    return lfilter([gain], [1.0, a1, a2], x.astype(np.float64))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(**JIT_OPTIONS)
    def _unfold1d_nb(x, width, dilation):
        b, c, t = x.shape
        pad = dilation * (width - 1) // 2
        # (B, T, C) so the inner channel loop reads contiguously
        xt = np.ascontiguousarray(x.transpose(0, 2, 1))
        cols = np.zeros((b, t, c * width), dtype=x.dtype)
        for n in range(b):
            for ti in range(t):
                for j in range(width):
                    src = ti + j * dilation - pad
                    if 0 <= src < t:
                        for ci in range(c):
                            cols[n, ti, ci * width + j] = xt[n, src, ci]
        return cols

    @njit(**JIT_OPTIONS)
    def _fold1d_nb(cols, channels, width, dilation):
        b, t, _ = cols.shape
        pad = dilation * (width - 1) // 2
        out = np.zeros((b, channels, t), dtype=cols.dtype)
        # j outermost to match the numpy summation order exactly
        for j in range(width):
            for n in range(b):
                for ti in range(t):
                    dst = ti + j * dilation - pad
                    if 0 <= dst < t:
                        for ci in range(channels):
                            out[n, ci, dst] += cols[n, ti, ci * width + j]
        return out

    @njit(**JIT_OPTIONS)
    def _resonate_nb(x, gain, a1, a2):
        y = np.empty(x.shape[0], dtype=np.float64)
        y1 = 0.0
        y2 = 0.0
        for i in range(x.shape[0]):
            yi = gain * x[i] - a1 * y1 - a2 * y2
            y[i] = yi
            y2 = y1
            y1 = yi
        return y

    def unfold1d(x: np.ndarray, width: int, dilation: int) -> np.ndarray:
        return _unfold1d_nb(np.ascontiguousarray(x), width, dilation)

    def fold1d(cols: np.ndarray, channels: int, width: int, dilation: int) -> np.ndarray:
        return _fold1d_nb(np.ascontiguousarray(cols), channels, width, dilation)

    def resonate(x: np.ndarray, freq: float, bandwidth: float, sample_rate: int) -> np.ndarray:
        gain, a1, a2 = resonator_coeffs(freq, bandwidth, sample_rate)
        return _resonate_nb(np.ascontiguousarray(x, dtype=np.float64), gain, a1, a2)

else:
    unfold1d = unfold1d_numpy
    fold1d = fold1d_numpy
    resonate = resonate_numpy


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
