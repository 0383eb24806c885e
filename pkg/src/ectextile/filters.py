"""Savitzky-Golay smoothing."""

from __future__ import annotations

import functools

import numpy as np


@functools.lru_cache(maxsize=32)
def _fit_operator(window: int, degree: int) -> np.ndarray:
    # rows: evaluate the least-squares polynomial at each window position
    t = np.arange(window) - (window - 1) / 2
    vander = np.vander(t, degree + 1, increasing=True)
    return vander @ np.linalg.pinv(vander)


def savgol_coeffs(window: int, degree: int) -> np.ndarray:
    """Convolution weights returning the fitted value at the window centre."""
    _check(window, degree)
    return _fit_operator(window, degree)[(window - 1) // 2].copy()


def _check(window: int, degree: int, n: int | None = None) -> None:
    if window % 2 != 1 or window < 1:
        raise ValueError(f"window must be a positive odd number, got {window}")
    if degree < 0 or degree >= window:
        raise ValueError(f"degree must satisfy 0 <= degree < window, got {degree}")
    if n is not None and n < window:
        raise ValueError(f"signal of length {n} is shorter than the window {window}")


def savitzky_golay(signal, window: int = 21, degree: int = 3) -> np.ndarray:
    """Smooth a 1-D signal with a centred least-squares polynomial fit.

    The first and last ``window // 2`` samples take their value from the
    polynomial fitted to the first/last full window, so polynomials of degree
    <= `degree` pass through unchanged everywhere.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    _check(window, degree, x.size)
    op = _fit_operator(window, degree)
    half = window // 2
    centre = op[half]
    out = np.empty_like(x)
    # sliding dot product: out[k] = sum_j centre[j] * x[k - half + j]
    windows = np.lib.stride_tricks.sliding_window_view(x, window)
    out[half:x.size - half] = windows @ centre
    out[:half] = op[:half] @ x[:window]
    out[x.size - half:] = op[half + 1:] @ x[-window:]
    return out
