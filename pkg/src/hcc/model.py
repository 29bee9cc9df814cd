"""The two-stage predictive model and its single-stage baseline.

Lower stage: five strided conv layers (ReLU) map raw samples to latents
z_s on a 10 ms grid, summarized by a GRU into contexts c_s. Upper stage:
three more conv layers map z_s to z_l on an 80 ms grid, summarized by a
second GRU into c_l. The conditioning vector for lower-stage prediction
is g = [c_s, c_l repeated to the short grid]; per-step linear heads map
g (or c_l for the upper stage) to latent predictions.

The "cpc-baseline" variant keeps only the lower stage and conditions on
c_s alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import numerics as nm
from .numerics import GruParams, ShapeError, Tensor

VARIANTS = ("cognitive", "cpc-baseline")


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    short_filters: tuple = (10, 8, 4, 4, 4)
    short_strides: tuple = (5, 4, 2, 2, 2)
    long_filters: tuple = (4, 4, 4)
    long_strides: tuple = (2, 2, 2)
    enc_channels: int = 512
    context_dim: int = 256
    pred_steps: int = 12
    variant: str = "cognitive"
    detach_top_down: bool = False

    def __post_init__(self):
        object.__setattr__(self, "short_filters", tuple(self.short_filters))
        object.__setattr__(self, "short_strides", tuple(self.short_strides))
        object.__setattr__(self, "long_filters", tuple(self.long_filters))
        object.__setattr__(self, "long_strides", tuple(self.long_strides))

    def validate(self):
        if len(self.short_filters) != len(self.short_strides):
            raise ModelError("short_filters and short_strides lengths differ")
        if len(self.long_filters) != len(self.long_strides):
            raise ModelError("long_filters and long_strides lengths differ")
        for v in self.short_filters + self.long_filters:
            if v < 1:
                raise ModelError("filter sizes must be >= 1")
        for v in self.short_strides + self.long_strides:
            if v < 1:
                raise ModelError("strides must be >= 1")
        if self.enc_channels < 1:
            raise ModelError("enc_channels must be >= 1")
        if self.context_dim < 1:
            raise ModelError("context_dim must be >= 1")
        if self.pred_steps < 1:
            raise ModelError("pred_steps must be >= 1")
        if self.variant not in VARIANTS:
            raise ModelError(f"variant must be one of {VARIANTS}")
        return self

    @property
    def short_hop(self):
        return math.prod(self.short_strides)

    @property
    def frame_ratio(self):
        return math.prod(self.long_strides)

    @property
    def long_hop(self):
        return self.short_hop * self.frame_ratio

    @property
    def lower_cond_dim(self):
        # g = [c_s, c_l] for the full model, c_s alone for the baseline
        return self.context_dim * (2 if self.variant == "cognitive" else 1)

    def to_dict(self):
        return {
            "short_filters": list(self.short_filters),
            "short_strides": list(self.short_strides),
            "long_filters": list(self.long_filters),
            "long_strides": list(self.long_strides),
            "enc_channels": self.enc_channels,
            "context_dim": self.context_dim,
            "pred_steps": self.pred_steps,
            "variant": self.variant,
            "detach_top_down": self.detach_top_down,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class Model:
    cfg: ModelConfig
    enc_s: list  # [(weight, bias)] conv layers
    enc_l: list
    gru_s: GruParams
    gru_l: GruParams | None
    heads_s: list  # W_s(k), k = 1..pred_steps
    heads_l: list
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def named_parameters(self):
        for i, (w, b) in enumerate(self.enc_s):
            yield f"enc_s.{i}.weight", w
            yield f"enc_s.{i}.bias", b
        for i, (w, b) in enumerate(self.enc_l):
            yield f"enc_l.{i}.weight", w
            yield f"enc_l.{i}.bias", b
        for stage, gru in (("s", self.gru_s), ("l", self.gru_l)):
            if gru is None:
                continue
            for gate in ("z", "r", "h"):
                yield f"gru_{stage}.w_{gate}", getattr(gru, f"w_{gate}")
                yield f"gru_{stage}.u_{gate}", getattr(gru, f"u_{gate}")
                yield f"gru_{stage}.b_{gate}", getattr(gru, f"b_{gate}")
        for k, w in enumerate(self.heads_s, start=1):
            yield f"heads_s.{k}.weight", w
        for k, w in enumerate(self.heads_l, start=1):
            yield f"heads_l.{k}.weight", w

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def _uniform_fan_in(rng, shape, fan_in, dtype, name):
    bound = 1.0 / math.sqrt(fan_in)
    return nm.param(rng.uniform(-bound, bound, size=shape).astype(dtype), name=name)


def _init_conv_stack(rng, filters, strides, c_in, c_out, dtype, prefix):
    layers = []
    for i, k in enumerate(filters):
        cin = c_in if i == 0 else c_out
        w = _uniform_fan_in(rng, (c_out, cin, k), cin * k, dtype, f"{prefix}.{i}.weight")
        b = nm.param(np.zeros(c_out, dtype=dtype), name=f"{prefix}.{i}.bias")
        layers.append((w, b))
    return layers


def _init_gru(rng, d_in, d_h, dtype, prefix):
    ts = []
    for gate in ("z", "r", "h"):
        ts.append(_uniform_fan_in(rng, (d_h, d_in), d_in, dtype, f"{prefix}.w_{gate}"))
        ts.append(_uniform_fan_in(rng, (d_h, d_h), d_h, dtype, f"{prefix}.u_{gate}"))
        ts.append(nm.param(np.zeros(d_h, dtype=dtype), name=f"{prefix}.b_{gate}"))
    # GruParams orders by gate: collect (w,u,b) per gate
    return GruParams(ts[0], ts[1], ts[2], ts[3], ts[4], ts[5], ts[6], ts[7], ts[8])


def build_model(cfg: ModelConfig, seed, precision="float32") -> Model:
    """Allocate and initialize all parameters, deterministically in seed.

    Weights are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero.
    """
    cfg.validate()
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ModelError(f"unsupported precision {precision!r}")
    rng = np.random.default_rng(seed)
    C, D = cfg.enc_channels, cfg.context_dim

    enc_s = _init_conv_stack(rng, cfg.short_filters, cfg.short_strides, 1, C, dtype, "enc_s")
    cognitive = cfg.variant == "cognitive"
    enc_l = (_init_conv_stack(rng, cfg.long_filters, cfg.long_strides, C, C, dtype, "enc_l")
             if cognitive else [])
    gru_s = _init_gru(rng, C, D, dtype, "gru_s")
    gru_l = _init_gru(rng, C, D, dtype, "gru_l") if cognitive else None
    heads_s = [_uniform_fan_in(rng, (C, cfg.lower_cond_dim), cfg.lower_cond_dim, dtype,
                               f"heads_s.{k}.weight")
               for k in range(1, cfg.pred_steps + 1)]
    heads_l = ([_uniform_fan_in(rng, (C, D), D, dtype, f"heads_l.{k}.weight")
                for k in range(1, cfg.pred_steps + 1)] if cognitive else [])
    return Model(cfg, enc_s, enc_l, gru_s, gru_l, heads_s, heads_l, dtype=dtype)


# ---------------------------------------------------------------------------
# forward ops

def _as_input_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(getattr(x, "samples", x), dtype=dtype)
    return Tensor(arr)


def encode_short(m: Model, x) -> Tensor:
    """Raw samples [W] or [B, W] -> latents z_s [T_s, C] or [B, T_s, C]."""
    x = _as_input_tensor(x, m.dtype)
    squeeze = x.ndim == 1
    if x.ndim not in (1, 2):
        raise ShapeError("encode_short: input must be [W] or [B, W]")
    h = nm.reshape(x, (1, -1, 1) if squeeze else (x.shape[0], x.shape[1], 1))
    for (w, b), s in zip(m.enc_s, m.cfg.short_strides):
        h = nm.relu(nm.conv1d_tm(h, w, b, s))
    return nm.reshape(h, h.shape[1:]) if squeeze else h


def encode_long(m: Model, z_s: Tensor) -> Tensor:
    """Latents z_s [T_s, C] or [B, T_s, C] -> z_l on the long frame grid."""
    if m.cfg.variant != "cognitive":
        raise ModelError("baseline variant has no long encoder")
    squeeze = z_s.ndim == 2
    T_s = z_s.shape[-2]
    if T_s < m.cfg.frame_ratio:
        raise ShapeError(f"encode_long: need at least {m.cfg.frame_ratio} short frames, got {T_s}")
    h = nm.reshape(z_s, (1,) + z_s.shape) if squeeze else z_s
    for (w, b), s in zip(m.enc_l, m.cfg.long_strides):
        h = nm.relu(nm.conv1d_tm(h, w, b, s))
    return nm.reshape(h, h.shape[1:]) if squeeze else h


def contextualize(m: Model, z: Tensor, stage: str) -> Tensor:
    """GRU summary c[t] of z[0..t]; zero initial state."""
    if stage == "short":
        gru = m.gru_s
    elif stage == "long":
        gru = m.gru_l
        if gru is None:
            raise ModelError("baseline variant has no long-stage context")
    else:
        raise ModelError(f"stage must be 'short' or 'long', got {stage!r}")
    if z.shape[-1] != m.cfg.enc_channels:
        raise ShapeError(f"contextualize: latent dim {z.shape[-1]} != {m.cfg.enc_channels}")
    if z.ndim == 2:
        h0 = Tensor(np.zeros(m.cfg.context_dim, dtype=m.dtype))
    else:
        h0 = Tensor(np.zeros((z.shape[0], m.cfg.context_dim), dtype=m.dtype))
    return nm.gru_sequence(z, gru, h0)


def top_down_combine(c_s: Tensor, c_l: Tensor, ratio: int) -> Tensor:
    """g[t] = concat(c_s[t], c_l[floor(t / ratio)]).

    The long grid must satisfy T_l == ceil(T_s / ratio), which the causal
    ceil-length conv chain guarantees; when ratio * T_l > T_s the repeated
    rows are truncated to T_s.
    """
    T_s, T_l = c_s.shape[-2], c_l.shape[-2]
    if T_l != -(-T_s // ratio):
        raise ShapeError(
            f"top_down_combine: {T_l} long frames inconsistent with {T_s} short frames "
            f"at ratio {ratio}")
    rep = nm.repeat_rows(c_l, ratio)
    if rep.shape[-2] != T_s:
        rep = nm.slice_rows(rep, 0, T_s)
    return nm.concat_last(c_s, rep)


@dataclass
class Outputs:
    z_s: Tensor
    c_s: Tensor
    g: Tensor
    z_l: Tensor | None = None
    c_l: Tensor | None = None


def forward(m: Model, x) -> Outputs:
    """Full forward pass producing latents, contexts and the combined g."""
    z_s = encode_short(m, x)
    c_s = contextualize(m, z_s, "short")
    if m.cfg.variant != "cognitive":
        return Outputs(z_s=z_s, c_s=c_s, g=c_s)
    z_l = encode_long(m, z_s)
    c_l = contextualize(m, z_l, "long")
    c_l_for_g = nm.stop_gradient(c_l) if m.cfg.detach_top_down else c_l
    g = top_down_combine(c_s, c_l_for_g, m.cfg.frame_ratio)
    return Outputs(z_s=z_s, c_s=c_s, g=g, z_l=z_l, c_l=c_l)


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(m: Model, path, extra_header: dict | None = None, extra_arrays=None):
    header = {"kind": "model", "config": m.cfg.to_dict(), "precision": m.dtype.name}
    if extra_header:
        header.update(extra_header)
    arrays = [(name, t.data) for name, t in m.named_parameters()]
    if extra_arrays:
        arrays.extend(extra_arrays)
    container.save_container(path, header, arrays)


def load_checkpoint(path) -> Model:
    header, arrays = container.load_container(path)
    return model_from_arrays(header, arrays)


def model_from_arrays(header: dict, arrays: dict) -> Model:
    cfg = ModelConfig.from_dict(header["config"])
    m = build_model(cfg, seed=0, precision=header.get("precision", "float32"))
    for name, t in m.named_parameters():
        if name not in arrays:
            raise container.CorruptFileError(f"checkpoint missing parameter {name}")
        arr = arrays[name]
        if tuple(arr.shape) != t.shape:
            raise container.CorruptFileError(
                f"checkpoint parameter {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(m.dtype, copy=False)
    return m
