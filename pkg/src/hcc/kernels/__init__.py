"""Hot-loop kernels with a compiled core and a pure-numpy fallback.

The serial recurrences (GRU over time, delta-modulation over frames) are
the parts numpy cannot vectorize; they live behind a small backend API
with two interchangeable implementations:

* ``_core`` — Cython extension, used when importable,
* ``_numpy`` — plain numpy loops, always available.

Dispatch is per call size: the compiled loop wins while the per-step
work is interpreter-bound (hidden sizes up to ~48, and the codec at any
size), while the numpy fallback leans on BLAS, which takes over for
large hidden states (see benchmarks/bench_kernels.py). Set
``HCC_KERNELS=numpy`` or ``HCC_KERNELS=cython`` to force one backend
(``cython`` raises if the extension is missing). GRU input projections
and weight gradients are dense matmuls either way and go through BLAS
here, outside the backend.
"""

import importlib
import os

import numpy as np

from . import _numpy

# measured crossover of the compiled recurrence vs the BLAS-backed loop
GRU_COMPILED_MAX_DIM = 48

_requested = os.environ.get("HCC_KERNELS", "auto")
if _requested not in ("auto", "cython", "numpy"):
    raise RuntimeError(f"HCC_KERNELS must be 'auto', 'cython' or 'numpy', got {_requested!r}")

_core = None
if _requested in ("auto", "cython"):
    try:
        _core = importlib.import_module("._core", __name__)
    except ImportError:
        if _requested == "cython":
            raise
BACKEND = "cython" if _core is not None else "numpy"


def backend_name():
    return BACKEND


def _gru_impl(hidden_dim):
    if _core is None or _requested == "numpy":
        return _numpy
    if _requested == "cython" or hidden_dim <= GRU_COMPILED_MAX_DIM:
        return _core
    return _numpy


def _dm_impl():
    if _core is None or _requested == "numpy":
        return _numpy
    return _core


def gru_forward(x, wz, uz, bz, wr, ur, br, wh, uh, bh, h0):
    """Run the gated recurrence over a [B, T, D_in] batch.

    Returns (h, z, r, hb): the hidden states plus the gate/candidate
    activations the backward pass needs.
    """
    B, T, d_in = x.shape
    D = h0.shape[1]
    xf = x.reshape(B * T, d_in)
    az = np.ascontiguousarray((xf @ wz.T + bz).reshape(B, T, D))
    ar = np.ascontiguousarray((xf @ wr.T + br).reshape(B, T, D))
    ah = np.ascontiguousarray((xf @ wh.T + bh).reshape(B, T, D))
    return _gru_impl(D).gru_recurrence_fwd(az, ar, ah, uz, ur, uh,
                                           np.ascontiguousarray(h0))


def gru_backward(x, wz, uz, wr, ur, wh, uh, h0, h, z, r, hb, gh):
    """Reverse accumulation through the recurrence; gh is d(loss)/d(h)."""
    B, T, d_in = x.shape
    D = h0.shape[1]
    daz, dar, dah, guz, gur, guh, gh0 = _gru_impl(D).gru_recurrence_bwd(
        np.ascontiguousarray(h0), h, z, r, hb, uz, ur, uh, np.ascontiguousarray(gh)
    )
    xf = x.reshape(B * T, d_in)
    daz2 = daz.reshape(B * T, D)
    dar2 = dar.reshape(B * T, D)
    dah2 = dah.reshape(B * T, D)
    gwz = daz2.T @ xf
    gwr = dar2.T @ xf
    gwh = dah2.T @ xf
    gbz = daz2.sum(axis=0)
    gbr = dar2.sum(axis=0)
    gbh = dah2.sum(axis=0)
    gx = (daz2 @ wz + dar2 @ wr + dah2 @ wh).reshape(B, T, d_in)
    return gx, gwz, guz, gbz, gwr, gur, gbr, gwh, guh, gbh, gh0


def dm_encode_steps(features, delta, x0):
    """1-bit delta modulation of [T, D] float32 features.

    Returns (bits, recon): bits is a uint8 [T-1, D] array of 0/1 decisions,
    recon the encoder's own reconstruction trajectory [T, D].
    """
    features = np.ascontiguousarray(features, dtype=np.float32)
    delta = np.ascontiguousarray(delta, dtype=np.float32)
    x0 = np.ascontiguousarray(x0, dtype=np.float32)
    return _dm_impl().dm_encode_steps(features, delta, x0)


def dm_decode_steps(bits, delta, x0):
    """Integrate a [T-1, D] bit plane back into the [T, D] trajectory."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    delta = np.ascontiguousarray(delta, dtype=np.float32)
    x0 = np.ascontiguousarray(x0, dtype=np.float32)
    return _dm_impl().dm_decode_steps(bits, delta, x0)
