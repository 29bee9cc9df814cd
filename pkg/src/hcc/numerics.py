"""Dense tensors and a minimal reverse-mode tape.

Exactly the op set the two-stage predictive model needs: strided 1-D
convolution with causal left padding, a GRU recurrence, affine maps, and
a handful of elementwise/shape ops, all differentiable by reverse
accumulation over a recorded tape. Arrays are numpy underneath; float64
is the default (test) precision, float32 the training one.

Ops record onto the innermost active ``Tape``; with no tape active they
are plain array computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class NumericsError(Exception):
    pass


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class Tensor:
    """Dense array in row-major order, immutable by convention once created."""

    __slots__ = ("data", "is_param", "name")

    def __init__(self, data, dtype=None, is_param=False, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.is_param = bool(is_param)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.data.shape} dtype={self.data.dtype}>"


def tensor(data, dtype=None):
    return Tensor(data, dtype=dtype)


def param(data, name=None, dtype=None):
    return Tensor(data, dtype=dtype, is_param=True, name=name)


@dataclass
class GruParams:
    """Gate parameters of one GRU: update z, reset r, candidate h.

    Input-to-hidden weights are (D_h x D_in), hidden-to-hidden (D_h x D_h),
    biases length D_h.
    """

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    def __post_init__(self):
        D, d_in = self.w_z.shape
        for w in (self.w_r, self.w_h):
            if w.shape != (D, d_in):
                raise ShapeError(f"input weight shape {w.shape} != {(D, d_in)}")
        for u in (self.u_z, self.u_r, self.u_h):
            if u.shape != (D, D):
                raise ShapeError(f"hidden weight shape {u.shape} != {(D, D)}")
        for b in (self.b_z, self.b_r, self.b_h):
            if b.shape != (D,):
                raise ShapeError(f"bias shape {b.shape} != {(D,)}")

    @property
    def input_dim(self):
        return self.w_z.shape[1]

    @property
    def hidden_dim(self):
        return self.w_z.shape[0]

    def tensors(self):
        return (self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h)


# ---------------------------------------------------------------------------
# tape

_TAPES: list["Tape"] = []


class Gradients:
    """Gradient lookup by tensor identity; absent tensors read as zero."""

    def __init__(self, by_id):
        self._by_id = by_id

    def get(self, t: Tensor) -> np.ndarray:
        g = self._by_id.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self.get(t)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id


class Tape:
    """Ordered record of executed primitives.

    Backward replay visits each recorded op exactly once, in reverse
    execution order; a value consumed by several ops receives the sum of
    their contributions.
    """

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, out, inputs, backward):
        self._entries.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(t) for every tensor reachable from loss."""
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        params: list[Tensor] = []
        for out, inputs, backward in reversed(self._entries):
            gout = grads.get(id(out))
            if gout is None:
                continue
            for t, gt in zip(inputs, backward(gout)):
                if gt is None:
                    continue
                prev = grads.get(id(t))
                # out-of-place: backward fns may return shared arrays
                grads[id(t)] = gt if prev is None else prev + gt
                if t.is_param:
                    params.append(t)
        for p in params:
            g = grads.get(id(p))
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
        return Gradients(grads)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def stop_gradient(x: Tensor) -> Tensor:
    """Identity with no recorded link; blocks reverse flow through x."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# op helpers

def _record(out, inputs, backward):
    t = _active_tape()
    if t is not None:
        t._record(out, inputs, backward)
    return out


def _same_dtype(name, *ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{name}: dtype mismatch {dt} vs {t.dtype}")
    return dt


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{opname} produced non-finite values")


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
    _same_dtype("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} vs {b.shape}")
    _same_dtype("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")
    _same_dtype("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * x.dtype.type(c))
    return _record(out, (x,), lambda g: (g * x.dtype.type(c),))


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)
    return _record(out, (x,), lambda g: (2.0 * x.data * g,))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),))


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("transpose_last2 needs >= 2 dims")
    out = Tensor(np.ascontiguousarray(x.data.swapaxes(-1, -2)))
    return _record(out, (x,), lambda g: (g.swapaxes(-1, -2),))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last: leading shapes {a.shape} vs {b.shape}")
    _same_dtype("concat_last", a, b)
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    da = a.shape[-1]
    return _record(out, (a, b), lambda g: (g[..., :da], g[..., da:]))


def concat_rows(parts) -> Tensor:
    """Stack 2-D blocks vertically (axis 0)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows: empty input")
    w = parts[0].shape[-1]
    for p in parts:
        if p.ndim != 2 or p.shape[-1] != w:
            raise ShapeError("concat_rows: blocks must be 2-D with equal width")
    _same_dtype("concat_rows", *parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _record(out, tuple(parts), backward)


def repeat_rows(x: Tensor, factor: int) -> Tensor:
    """Repeat each row (axis -2) `factor` times: [a;b] x3 -> [a;a;a;b;b;b]."""
    if x.ndim < 2:
        raise ShapeError("repeat_rows needs >= 2 dims")
    if factor < 1:
        raise ShapeError("repeat_rows: factor must be >= 1")
    out = Tensor(np.repeat(x.data, factor, axis=-2))
    lead = x.shape[:-2]
    T, D = x.shape[-2], x.shape[-1]

    def backward(g):
        return (g.reshape(*lead, T, factor, D).sum(axis=-2),)

    return _record(out, (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("slice_rows needs >= 2 dims")
    T = x.shape[-2]
    if not (0 <= start < stop <= T):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {T} rows")
    out = Tensor(x.data[..., start:stop, :])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., start:stop, :] = g
        return (gx,)

    return _record(out, (x,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index (repeats allowed)."""
    if x.ndim != 2:
        raise ShapeError("gather_rows needs a 2-D tensor")
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: idx must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather_rows: index out of range")
    out = Tensor(x.data[idx])
    M, C = x.shape

    def backward(g):
        # scatter-add via one bincount; np.add.at is an order slower here
        flat = (idx[:, None] * C + np.arange(C)).ravel()
        gx = np.bincount(flat, weights=g.ravel().astype(np.float64), minlength=M * C)
        return (gx.reshape(M, C).astype(g.dtype, copy=False),)

    return _record(out, (x,), backward)


def take_indices(x: Tensor, idx) -> Tensor:
    """Per-row element pick from a 2-D tensor: out[m] = x[m, idx[m]]."""
    if x.ndim != 2:
        raise ShapeError("take_indices needs a 2-D tensor")
    idx = np.asarray(idx)
    M, N = x.shape
    if idx.shape != (M,):
        raise ShapeError(f"take_indices: idx shape {idx.shape} != ({M},)")
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise ShapeError("take_indices: index out of range")
    rows = np.arange(M)
    out = Tensor(x.data[rows, idx])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[rows, idx] = g
        return (gx,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _record(out, (x,), backward)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean())

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _record(out, (x,), backward)


def log_sum_exp(x: Tensor) -> Tensor:
    """Overflow-safe log-sum-exp over the last axis."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    tot = e.sum(axis=-1)
    out = Tensor(m[..., 0] + np.log(tot))
    _check_finite(out.data, "log_sum_exp")
    softmax = e / tot[..., None]

    def backward(g):
        return (g[..., None] * softmax,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear maps

def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W^T (+ b) over the last axis; w is (D_out x D_in)."""
    if w.ndim != 2:
        raise ShapeError("affine: weight must be 2-D")
    d_out, d_in = w.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"affine: input dim {x.shape[-1]} != {d_in}")
    if b is not None and b.shape != (d_out,):
        raise ShapeError(f"affine: bias shape {b.shape} != ({d_out},)")
    _same_dtype("affine", *( (x, w) if b is None else (x, w, b) ))
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    y2 = x2 @ w.data.T
    if b is not None:
        y2 = y2 + b.data
    out = Tensor(y2.reshape(*lead, d_out))
    _check_finite(out.data, "affine")

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, backward)


def rowwise_dot(p: Tensor, z: Tensor) -> Tensor:
    """Scores s[m, n] = <p[m], z[m, n]> for p [M, C] against z [M, N, C]."""
    if p.ndim != 2 or z.ndim != 3:
        raise ShapeError("rowwise_dot: need p [M, C] and z [M, N, C]")
    M, C = p.shape
    if z.shape[0] != M or z.shape[2] != C:
        raise ShapeError(f"rowwise_dot: shapes {p.shape} vs {z.shape}")
    _same_dtype("rowwise_dot", p, z)
    out = Tensor(np.einsum("mc,mnc->mn", p.data, z.data))

    def backward(g):
        gp = np.einsum("mn,mnc->mc", g, z.data)
        gz = g[:, :, None] * p.data[:, None, :]
        return (gp, gz)

    return _record(out, (p, z), backward)


# ---------------------------------------------------------------------------
# convolution

def conv_output_length(L: int, stride: int) -> int:
    return -(-L // stride)


def conv_left_pad(L: int, k: int, stride: int) -> int:
    T = conv_output_length(L, stride)
    return max(0, (T - 1) * stride + k - L)


def conv1d_tm(x: Tensor, w: Tensor, b: Tensor | None, stride: int) -> Tensor:
    """Time-major strided convolution: [B, L, C_in] -> [B, T, C_out].

    Internal fast path (one patch copy, no transposes); `conv1d` is the
    channel-major surface on top of it. Causal left-zero padding keeps
    the output length at exactly ceil(L / stride).
    """
    if w.ndim != 3:
        raise ShapeError("conv1d: weight must be [C_out, C_in, k]")
    if x.ndim != 3:
        raise ShapeError("conv1d_tm: input must be [B, L, C_in]")
    if stride < 1:
        raise ShapeError("conv1d: stride must be >= 1")
    xd = x.data
    B, L, c_in = xd.shape
    c_out, c_in_w, k = w.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv1d: {c_in} input channels vs weight {c_in_w}")
    if L < 1:
        raise ShapeError("conv1d: empty input")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {b.shape} != ({c_out},)")
    _same_dtype("conv1d", *( (x, w) if b is None else (x, w, b) ))

    T = conv_output_length(L, stride)
    pad = conv_left_pad(L, k, stride)
    xp = np.zeros((B, L + pad, c_in), dtype=xd.dtype)
    xp[:, pad:, :] = xd
    starts = np.arange(T) * stride
    # [B, T, C_in, k] patch copy; (c, j) flattening matches the weight layout
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, starts]
    patches = windows.reshape(B * T, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k)
    y2 = patches @ wmat.T
    if b is not None:
        y2 = y2 + b.data
    out = Tensor(y2.reshape(B, T, c_out))
    _check_finite(out.data, "conv1d")

    def backward(g):
        g2 = g.reshape(B * T, c_out)
        gw = (g2.T @ patches).reshape(c_out, c_in, k)
        gp = (g2 @ wmat).reshape(B, T, c_in, k)
        gxp = np.zeros((B, L + pad, c_in), dtype=g2.dtype)
        for j in range(k):
            gxp[:, j:j + (T - 1) * stride + 1:stride, :] += gp[:, :, :, j]
        gx = gxp[:, pad:, :]
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int) -> Tensor:
    """Strided 1-D convolution with causal (left-zero) padding.

    Input is [C_in, L] or batched [B, C_in, L]; weight [C_out, C_in, k];
    out[c][t] = bias[c] + sum_{i,j} weight[c][i][j] * padded[i][t*stride+j].
    Padding is computed so the output length is exactly ceil(L / stride)
    and applied entirely on the left, so frame t never sees past its end.
    """
    squeeze = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError("conv1d: input must be [C_in, L] or [B, C_in, L]")
    tm = transpose_last2(x)
    if squeeze:
        tm = reshape(tm, (1,) + tm.shape)
    y = conv1d_tm(tm, w, b, stride)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return transpose_last2(y)


# ---------------------------------------------------------------------------
# recurrence

def gru_sequence(x: Tensor, p: GruParams, h0: Tensor) -> Tensor:
    """Standard GRU over time.

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    hb_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * hb_t

    Input [T, D_in] (or batched [B, T, D_in]) with initial state [D_h]
    (or [B, D_h]); returns the h_1..h_T sequence.
    """
    squeeze = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError("gru_sequence: input must be [T, D_in] or [B, T, D_in]")
    xd = x.data[None] if squeeze else x.data
    B, T, d_in = xd.shape
    if T < 1:
        raise ShapeError("gru_sequence: empty sequence")
    if d_in != p.input_dim:
        raise ShapeError(f"gru_sequence: input dim {d_in} != {p.input_dim}")
    D = p.hidden_dim
    h0d = h0.data[None] if h0.ndim == 1 else h0.data
    if h0d.shape != (B, D):
        raise ShapeError(f"gru_sequence: h0 shape {h0.shape} incompatible with ({B}, {D})")
    _same_dtype("gru_sequence", x, h0, *p.tensors())

    args = [t.data for t in p.tensors()]
    h, zg, rg, hb = kernels.gru_forward(np.ascontiguousarray(xd), *args, h0d)
    out = Tensor(h[0] if squeeze else h)
    _check_finite(out.data, "gru_sequence")

    def backward(g):
        gh = np.ascontiguousarray(g[None] if squeeze else g)
        res = kernels.gru_backward(
            xd, p.w_z.data, p.u_z.data, p.w_r.data, p.u_r.data, p.w_h.data, p.u_h.data,
            h0d, h, zg, rg, hb, gh,
        )
        gx, gwz, guz, gbz, gwr, gur, gbr, gwh, guh, gbh, gh0 = res
        if squeeze:
            gx = gx[0]
        if h0.ndim == 1:
            gh0 = gh0[0]
        return (gx, gwz, guz, gbz, gwr, gur, gbr, gwh, guh, gbh, gh0)

    inputs = (x,) + p.tensors() + (h0,)
    return _record(out, inputs, backward)
