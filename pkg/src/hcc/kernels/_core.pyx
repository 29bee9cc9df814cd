# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled recurrence kernels: GRU over time, delta modulation over frames.

Same signatures and numerics as ``_numpy``; the win is keeping the serial
time loop (and its small matvecs) out of the interpreter.
"""

import numpy as np

cimport cython
from libc.math cimport exp, tanh

ctypedef fused real:
    float
    double


cdef inline real _sigmoid(real x) noexcept nogil:
    cdef real e
    if x >= 0:
        return <real>1.0 / (<real>1.0 + <real>exp(-x))
    e = <real>exp(x)
    return e / (<real>1.0 + e)


def gru_recurrence_fwd(real[:, :, ::1] az, real[:, :, ::1] ar, real[:, :, ::1] ah,
                       real[:, ::1] uz, real[:, ::1] ur, real[:, ::1] uh,
                       real[:, ::1] h0):
    cdef Py_ssize_t B = az.shape[0], T = az.shape[1], D = az.shape[2]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    h_arr = np.empty((B, T, D), dtype=dtype)
    z_arr = np.empty((B, T, D), dtype=dtype)
    r_arr = np.empty((B, T, D), dtype=dtype)
    hb_arr = np.empty((B, T, D), dtype=dtype)
    rh_arr = np.empty(D, dtype=dtype)
    cdef real[:, :, ::1] h = h_arr
    cdef real[:, :, ::1] z = z_arr
    cdef real[:, :, ::1] r = r_arr
    cdef real[:, :, ::1] hb = hb_arr
    cdef real[::1] rh = rh_arr
    cdef Py_ssize_t b, t, i, j
    cdef real sz, sr, sh, zt, hbt, hp_j
    with nogil:
        for b in range(B):
            for t in range(T):
                for i in range(D):
                    sz = az[b, t, i]
                    sr = ar[b, t, i]
                    if t == 0:
                        for j in range(D):
                            hp_j = h0[b, j]
                            sz = sz + uz[i, j] * hp_j
                            sr = sr + ur[i, j] * hp_j
                    else:
                        for j in range(D):
                            hp_j = h[b, t - 1, j]
                            sz = sz + uz[i, j] * hp_j
                            sr = sr + ur[i, j] * hp_j
                    z[b, t, i] = _sigmoid(sz)
                    r[b, t, i] = _sigmoid(sr)
                if t == 0:
                    for j in range(D):
                        rh[j] = r[b, t, j] * h0[b, j]
                else:
                    for j in range(D):
                        rh[j] = r[b, t, j] * h[b, t - 1, j]
                for i in range(D):
                    sh = ah[b, t, i]
                    for j in range(D):
                        sh = sh + uh[i, j] * rh[j]
                    hbt = <real>tanh(sh)
                    hb[b, t, i] = hbt
                    zt = z[b, t, i]
                    if t == 0:
                        h[b, t, i] = (<real>1.0 - zt) * h0[b, i] + zt * hbt
                    else:
                        h[b, t, i] = (<real>1.0 - zt) * h[b, t - 1, i] + zt * hbt
    return h_arr, z_arr, r_arr, hb_arr


def gru_recurrence_bwd(real[:, ::1] h0, real[:, :, ::1] h, real[:, :, ::1] z,
                       real[:, :, ::1] r, real[:, :, ::1] hb,
                       real[:, ::1] uz, real[:, ::1] ur, real[:, ::1] uh,
                       real[:, :, ::1] gh):
    cdef Py_ssize_t B = h.shape[0], T = h.shape[1], D = h.shape[2]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    daz_arr = np.empty((B, T, D), dtype=dtype)
    dar_arr = np.empty((B, T, D), dtype=dtype)
    dah_arr = np.empty((B, T, D), dtype=dtype)
    guz_arr = np.zeros((D, D), dtype=dtype)
    gur_arr = np.zeros((D, D), dtype=dtype)
    guh_arr = np.zeros((D, D), dtype=dtype)
    ghp_arr = np.zeros((B, D), dtype=dtype)
    g_arr = np.empty(D, dtype=dtype)
    drh_arr = np.empty(D, dtype=dtype)
    cdef real[:, :, ::1] daz = daz_arr
    cdef real[:, :, ::1] dar = dar_arr
    cdef real[:, :, ::1] dah = dah_arr
    cdef real[:, ::1] guz = guz_arr
    cdef real[:, ::1] gur = gur_arr
    cdef real[:, ::1] guh = guh_arr
    cdef real[:, ::1] ghp = ghp_arr
    cdef real[::1] g = g_arr
    cdef real[::1] drh = drh_arr
    cdef Py_ssize_t b, t, i, j
    cdef real zt, rt, hbt, hprev_i, hprev_j, da_h_i, dz_i, da_z_i, dr_i, da_r_i, acc
    with nogil:
        for b in range(B):
            for i in range(D):
                ghp[b, i] = 0
            for t in range(T - 1, -1, -1):
                for i in range(D):
                    g[i] = gh[b, t, i] + ghp[b, i]
                # candidate pre-activation grads first: drh needs all of da_h
                for i in range(D):
                    zt = z[b, t, i]
                    hbt = hb[b, t, i]
                    dah[b, t, i] = (g[i] * zt) * (<real>1.0 - hbt * hbt)
                for j in range(D):
                    acc = 0
                    for i in range(D):
                        acc = acc + dah[b, t, i] * uh[i, j]
                    drh[j] = acc
                for i in range(D):
                    zt = z[b, t, i]
                    rt = r[b, t, i]
                    hbt = hb[b, t, i]
                    if t == 0:
                        hprev_i = h0[b, i]
                    else:
                        hprev_i = h[b, t - 1, i]
                    dz_i = g[i] * (hbt - hprev_i)
                    da_z_i = dz_i * zt * (<real>1.0 - zt)
                    dr_i = drh[i] * hprev_i
                    da_r_i = dr_i * rt * (<real>1.0 - rt)
                    daz[b, t, i] = da_z_i
                    dar[b, t, i] = da_r_i
                    da_h_i = dah[b, t, i]
                    for j in range(D):
                        if t == 0:
                            hprev_j = h0[b, j]
                        else:
                            hprev_j = h[b, t - 1, j]
                        guh[i, j] = guh[i, j] + da_h_i * (r[b, t, j] * hprev_j)
                        guz[i, j] = guz[i, j] + da_z_i * hprev_j
                        gur[i, j] = gur[i, j] + da_r_i * hprev_j
                for j in range(D):
                    acc = g[j] * (<real>1.0 - z[b, t, j]) + drh[j] * r[b, t, j]
                    for i in range(D):
                        acc = acc + daz[b, t, i] * uz[i, j] + dar[b, t, i] * ur[i, j]
                    ghp[b, j] = acc
    return daz_arr, dar_arr, dah_arr, guz_arr, gur_arr, guh_arr, ghp_arr


def dm_encode_steps(float[:, ::1] features, float[::1] delta, float[::1] x0):
    cdef Py_ssize_t T = features.shape[0], D = features.shape[1]
    cdef Py_ssize_t Tm1 = T - 1 if T > 1 else 0
    bits_arr = np.empty((Tm1, D), dtype=np.uint8)
    recon_arr = np.empty((T, D), dtype=np.float32)
    cdef unsigned char[:, ::1] bits = bits_arr
    cdef float[:, ::1] recon = recon_arr
    cdef Py_ssize_t t, d
    cdef float xh
    with nogil:
        for d in range(D):
            xh = x0[d]
            recon[0, d] = xh
            for t in range(1, T):
                if features[t, d] >= xh:
                    xh = xh + delta[d]
                    bits[t - 1, d] = 1
                else:
                    xh = xh - delta[d]
                    bits[t - 1, d] = 0
                recon[t, d] = xh
    return bits_arr, recon_arr


def dm_decode_steps(const unsigned char[:, ::1] bits, float[::1] delta, float[::1] x0):
    cdef Py_ssize_t Tm1 = bits.shape[0], D = bits.shape[1]
    recon_arr = np.empty((Tm1 + 1, D), dtype=np.float32)
    cdef float[:, ::1] recon = recon_arr
    cdef Py_ssize_t t, d
    cdef float xh
    with nogil:
        for d in range(D):
            xh = x0[d]
            recon[0, d] = xh
            for t in range(Tm1):
                if bits[t, d] != 0:
                    xh = xh + delta[d]
                else:
                    xh = xh - delta[d]
                recon[t + 1, d] = xh
    return recon_arr
