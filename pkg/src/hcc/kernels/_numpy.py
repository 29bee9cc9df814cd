"""Pure-numpy fallback for the recurrence kernels.

Matches the Cython extension's behaviour; the time loop stays in Python
so this is the slow path for long sequences.
"""

import numpy as np


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_recurrence_fwd(az, ar, ah, uz, ur, uh, h0):
    B, T, D = az.shape
    h = np.empty((B, T, D), dtype=az.dtype)
    z = np.empty_like(h)
    r = np.empty_like(h)
    hb = np.empty_like(h)
    hp = h0
    for t in range(T):
        zt = _sigmoid(az[:, t] + hp @ uz.T)
        rt = _sigmoid(ar[:, t] + hp @ ur.T)
        hbt = np.tanh(ah[:, t] + (rt * hp) @ uh.T)
        hp = (1.0 - zt) * hp + zt * hbt
        z[:, t] = zt
        r[:, t] = rt
        hb[:, t] = hbt
        h[:, t] = hp
    return h, z, r, hb


def gru_recurrence_bwd(h0, h, z, r, hb, uz, ur, uh, gh):
    B, T, D = h.shape
    dt = h.dtype
    daz = np.empty((B, T, D), dtype=dt)
    dar = np.empty_like(daz)
    dah = np.empty_like(daz)
    guz = np.zeros((D, D), dtype=dt)
    gur = np.zeros((D, D), dtype=dt)
    guh = np.zeros((D, D), dtype=dt)
    ghp = np.zeros((B, D), dtype=dt)
    for t in range(T - 1, -1, -1):
        g = gh[:, t] + ghp
        hprev = h[:, t - 1] if t > 0 else h0
        zt = z[:, t]
        rt = r[:, t]
        hbt = hb[:, t]
        da_h = (g * zt) * (1.0 - hbt * hbt)
        dz = g * (hbt - hprev)
        da_z = dz * zt * (1.0 - zt)
        drh = da_h @ uh
        dr = drh * hprev
        da_r = dr * rt * (1.0 - rt)
        guh += da_h.T @ (rt * hprev)
        guz += da_z.T @ hprev
        gur += da_r.T @ hprev
        ghp = g * (1.0 - zt) + drh * rt + da_z @ uz + da_r @ ur
        daz[:, t] = da_z
        dar[:, t] = da_r
        dah[:, t] = da_h
    return daz, dar, dah, guz, gur, guh, ghp


def dm_encode_steps(features, delta, x0):
    T, D = features.shape
    bits = np.empty((max(T - 1, 0), D), dtype=np.uint8)
    recon = np.empty((T, D), dtype=np.float32)
    xh = x0.copy()
    recon[0] = xh
    for t in range(1, T):
        up = features[t] >= xh
        xh = np.where(up, xh + delta, xh - delta)
        bits[t - 1] = up
        recon[t] = xh
    return bits, recon


def dm_decode_steps(bits, delta, x0):
    Tm1, D = bits.shape
    recon = np.empty((Tm1 + 1, D), dtype=np.float32)
    xh = x0.copy()
    recon[0] = xh
    for t in range(Tm1):
        xh = np.where(bits[t] != 0, xh + delta, xh - delta)
        recon[t + 1] = xh
    return recon
