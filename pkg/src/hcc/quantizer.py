"""1-bit delta-modulation codec for slow-evolving feature sequences.

Frame 0 of each dimension is coded on 5 bits (32 uniform levels over a
calibrated range); every later frame spends one bit that moves the
reconstruction up or down by the dimension's step. Encoder and decoder
run the same integrator, so decode(encode(x)) is bit-deterministic.

Wire format (little-endian):

    "HCCQ" | u8 version | u16 D | u32 T
    | per dim: f32 lo, f32 hi, f32 delta
    | per dim: u8 init code (5 bits used, high 3 zero)
    | payload: (T-1) * D bits, frame-major, packed LSB-first per byte
    | u32 CRC32 of all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels

MAGIC = b"HCCQ"
VERSION = 1
INIT_LEVELS = 32  # 5-bit initial code
STEP_FLOOR = 1e-6


class BitstreamError(Exception):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class ChecksumError(BitstreamError):
    pass


@dataclass
class StepTable:
    """Per-dimension step and initial-quantizer range."""

    delta: np.ndarray  # [D] > 0
    lo: np.ndarray  # [D]
    hi: np.ndarray  # [D] > lo

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        self.lo = np.asarray(self.lo, dtype=np.float32)
        self.hi = np.asarray(self.hi, dtype=np.float32)
        if not (self.delta.shape == self.lo.shape == self.hi.shape):
            raise BitstreamError("step table fields must have equal length")
        if np.any(self.delta <= 0):
            raise BitstreamError("steps must be positive")
        if np.any(self.hi <= self.lo):
            raise BitstreamError("init range must satisfy hi > lo")

    @property
    def n_dims(self):
        return self.delta.shape[0]


def calibrate_steps(features, floor=STEP_FLOOR) -> StepTable:
    """Steps from training features [M, D] (or a list of [T, D] sequences).

    delta_d is the median absolute consecutive-frame difference (within
    each sequence), floored; the init range is the observed min/max,
    widened when a dimension is constant.
    """
    if isinstance(features, np.ndarray):
        seqs = [features]
    else:
        seqs = [np.asarray(f) for f in features]
    seqs = [np.asarray(s, dtype=np.float64) for s in seqs if len(s) > 0]
    if not seqs or sum(s.shape[0] for s in seqs) < 2:
        raise BitstreamError("calibration needs at least 2 frames")
    diffs = [np.abs(np.diff(s, axis=0)) for s in seqs if s.shape[0] >= 2]
    if not diffs:
        raise BitstreamError("calibration needs a sequence with >= 2 frames")
    delta = np.maximum(np.median(np.concatenate(diffs, axis=0), axis=0), floor)
    stacked = np.concatenate(seqs, axis=0)
    lo = stacked.min(axis=0)
    hi = stacked.max(axis=0)
    flat = hi - lo < 1e-12
    hi = np.where(flat, lo + 1e-6, hi)
    return StepTable(delta.astype(np.float32), lo.astype(np.float32), hi.astype(np.float32))


@dataclass
class FeatureBitstream:
    """Header (step table + 5-bit init codes) plus 1 bit/dim/frame payload."""

    n_dims: int
    n_frames: int
    table: StepTable
    init_codes: np.ndarray  # [D] uint8, values 0..31
    payload: bytes

    @property
    def payload_bits(self):
        return max(0, (self.n_frames - 1) * self.n_dims)

    def init_values(self):
        span = (self.table.hi - self.table.lo) / np.float32(INIT_LEVELS - 1)
        return (self.table.lo + self.init_codes.astype(np.float32) * span).astype(np.float32)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<BHI", VERSION, self.n_dims, self.n_frames)]
        for d in range(self.n_dims):
            parts.append(struct.pack("<fff", self.table.lo[d], self.table.hi[d],
                                     self.table.delta[d]))
        parts.append(self.init_codes.astype(np.uint8).tobytes())
        parts.append(self.payload)
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def write(self, path):
        from pathlib import Path

        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureBitstream":
        if len(data) < 11:
            raise TruncatedStreamError("stream shorter than fixed header")
        if data[:4] != MAGIC:
            raise BitstreamError("bad magic")
        version, D, T = struct.unpack_from("<BHI", data, 4)
        if version != VERSION:
            raise BitstreamError(f"unsupported stream version {version}")
        payload_bytes = (max(0, (T - 1) * D) + 7) // 8
        expected = 11 + 12 * D + D + payload_bytes + 4
        if len(data) < expected:
            raise TruncatedStreamError(
                f"truncated payload: {len(data)} bytes, header implies {expected}")
        if len(data) > expected:
            raise BitstreamError("trailing bytes after stream")
        (crc,) = struct.unpack_from("<I", data, expected - 4)
        if zlib.crc32(data[:expected - 4]) != crc:
            raise ChecksumError("checksum mismatch")
        steps = np.frombuffer(data, dtype="<f4", count=3 * D, offset=11).reshape(D, 3)
        init = np.frombuffer(data, dtype=np.uint8, count=D, offset=11 + 12 * D).copy()
        if np.any(init >= INIT_LEVELS):
            raise BitstreamError("init codes exceed 5 bits")
        payload = data[11 + 13 * D:expected - 4]
        table = StepTable(steps[:, 2].copy(), steps[:, 0].copy(), steps[:, 1].copy())
        return cls(n_dims=D, n_frames=T, table=table, init_codes=init, payload=payload)

    @classmethod
    def read(cls, path):
        from pathlib import Path

        return cls.from_bytes(Path(path).read_bytes())


def _quantize_init(first_frame, table: StepTable):
    span = (table.hi - table.lo) / np.float32(INIT_LEVELS - 1)
    codes = np.rint((first_frame - table.lo) / span)
    return np.clip(codes, 0, INIT_LEVELS - 1).astype(np.uint8)


def dm_encode(features, table: StepTable) -> FeatureBitstream:
    """Encode [T, D] features: 5-bit init per dim, then one bit per frame.

    Bit b(t, d) = 1 iff x_d(t) >= reconstruction_d(t-1) (ties go up);
    the reconstruction then moves by +-delta_d.
    """
    x = np.ascontiguousarray(features, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] < 1:
        raise BitstreamError("features must be [T >= 1, D]")
    if x.shape[1] != table.n_dims:
        raise BitstreamError(f"{x.shape[1]} dims vs step table {table.n_dims}")
    if not np.all(np.isfinite(x)):
        raise BitstreamError("features must be finite")
    T, D = x.shape
    init_codes = _quantize_init(x[0], table)
    span = (table.hi - table.lo) / np.float32(INIT_LEVELS - 1)
    x0 = (table.lo + init_codes.astype(np.float32) * span).astype(np.float32)
    bits, _ = kernels.dm_encode_steps(x, table.delta, x0)
    payload = np.packbits(bits.reshape(-1), bitorder="little").tobytes()
    return FeatureBitstream(n_dims=D, n_frames=T, table=table,
                            init_codes=init_codes, payload=payload)


def dm_decode(bs: FeatureBitstream) -> np.ndarray:
    """Reconstruct the encoder's [T, D] trajectory from a bitstream."""
    T, D = bs.n_frames, bs.n_dims
    n_bits = bs.payload_bits
    raw = np.frombuffer(bs.payload, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    if bits.size < n_bits:
        raise TruncatedStreamError("payload shorter than (T-1) * D bits")
    bits = bits[:n_bits].reshape(max(T - 1, 0), D)
    return kernels.dm_decode_steps(bits, bs.table.delta, bs.init_values())


def bitrate(n_dims, frame_period_s, include_header=False, n_frames=None):
    """Bits per second of the codec output.

    Payload alone is n_dims / frame_period_s (1 bit per dim per frame);
    with include_header the serialized header+CRC is amortized over the
    n_frames window.
    """
    if n_dims < 1 or frame_period_s <= 0:
        raise ValueError("need positive dims and frame period")
    rate = n_dims / frame_period_s
    if include_header:
        if not n_frames or n_frames < 1:
            raise ValueError("header amortization needs n_frames")
        header_bits = 8 * (11 + 13 * n_dims + 4)
        rate += header_bits / (n_frames * frame_period_s)
    return rate


def quantize_roundtrip(features, table: StepTable):
    """Encode+decode in one call; returns (decoded, bitstream)."""
    bs = dm_encode(features, table)
    return dm_decode(bs), bs


def quantize_feature_table(table, train_mask):
    """Codec round-trip over a per-frame FeatureTable, one stream per window.

    The step table is calibrated on training-window rows only and shared
    by every window of the source. Returns (decoded table, stats dict).
    """
    from dataclasses import replace

    ids = np.asarray(table.window_ids)
    if ids.size == 0:
        raise BitstreamError("empty feature table")
    boundaries = np.flatnonzero(np.diff(ids)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [ids.size]])
    train_mask = np.asarray(train_mask, dtype=bool)
    train_seqs = [table.X[s:e] for s, e in zip(starts, ends) if train_mask[s]]
    if not train_seqs:
        raise BitstreamError("no training windows to calibrate on")
    steps = calibrate_steps(train_seqs)
    decoded = np.empty_like(table.X, dtype=np.float32)
    payload_bits = 0
    stream_bytes = 0
    for s, e in zip(starts, ends):
        bs = dm_encode(table.X[s:e], steps)
        decoded[s:e] = dm_decode(bs)
        payload_bits += bs.payload_bits
        stream_bytes += len(bs.to_bytes())
    stats = {
        "n_windows": int(len(starts)),
        "payload_bits": int(payload_bits),
        "stream_bytes": int(stream_bytes),
        "payload_bitrate": bitrate(table.dim, table.frame_period_s),
        "amortized_bitrate": bitrate(table.dim, table.frame_period_s,
                                     include_header=True,
                                     n_frames=int(ends[0] - starts[0])),
    }
    quantized = replace(table, X=decoded, source=table.source + "+dm")
    return quantized, steps, stats
