"""Audio ingestion and desk-scale synthetic corpora.

Real input is RIFF/WAVE PCM16 mono, cut into fixed windows. For
verification we synthesize harmonic source-filter windows with planted
attributes and per-sample labels:

* ``long_attr``   — fundamental-frequency band (disjoint per class) plus a
  class-specific two-pole resonance; constant over the window,
* ``long_attr2``  — global amplitude-modulation rate; constant over the window,
* ``short_attr``  — harmonic-amplitude template, piecewise constant over
  segments of configurable length.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter


class DataError(Exception):
    pass


class MalformedHeaderError(DataError):
    pass


class UnsupportedEncodingError(DataError):
    pass


class SampleRateError(DataError):
    pass


@dataclass
class AudioWindow:
    """Fixed-length mono sample vector; model input."""

    samples: np.ndarray  # float32, |x| <= 1 after normalization
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DataError("window samples must be 1-D")


@dataclass
class LabeledWindow:
    window: AudioWindow
    long_attr: int
    long_attr2: int
    short_attr: np.ndarray  # int label per sample, piecewise constant

    @property
    def short_runs(self):
        return runs_from_labels(self.short_attr)


@dataclass(frozen=True)
class SynthConfig:
    n_windows: int = 100
    n_long_classes: int = 4
    n_long2_classes: int = 3
    n_short_classes: int = 8
    segment_ms: tuple = (80.0, 250.0)
    noise: float = 0.02
    seed: int = 0
    window_samples: int = 20480
    sample_rate: int = 16000

    def validate(self):
        if self.n_windows < 1:
            raise DataError("n_windows must be >= 1")
        for name in ("n_long_classes", "n_long2_classes", "n_short_classes"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        lo, hi = self.segment_ms
        if not (40.0 <= lo <= hi <= 400.0):
            raise DataError("segment_ms range must lie within [40, 400] ms")
        if self.noise < 0:
            raise DataError("noise must be >= 0")
        if self.window_samples < 1 or self.sample_rate < 1:
            raise DataError("window_samples and sample_rate must be positive")
        lo_samples = int(round(lo * self.sample_rate / 1000.0))
        if lo_samples > self.window_samples:
            raise DataError("segment range infeasible for window length")
        return self


# ---------------------------------------------------------------------------
# WAV ingestion

def _read_wav_pcm16_mono(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError(f"malformed header: {path}")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if size < 16 or len(body) < 16:
                raise MalformedHeaderError(f"malformed header: short fmt chunk in {path}")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < size:
                raise MalformedHeaderError(f"malformed header: truncated data chunk in {path}")
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise MalformedHeaderError(f"malformed header: missing fmt/data chunk in {path}")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedEncodingError(f"unsupported encoding: format tag {audio_format}")
    if channels != 1:
        raise UnsupportedEncodingError(f"unsupported encoding: {channels} channels (mono required)")
    if bits != 16:
        raise UnsupportedEncodingError(f"unsupported encoding: {bits}-bit samples")
    samples = np.frombuffer(payload[:len(payload) - len(payload) % 2], dtype="<i2")
    return samples, rate


def load_wav(path, window_samples=20480, sample_rate=16000, stride=None):
    """Yield fixed-length AudioWindows from a PCM16 mono WAV file.

    Samples are scaled to [-1, 1) by /32768; a strided cursor emits
    windows and drops the trailing partial one.
    """
    if stride is None:
        stride = window_samples
    if stride < 1 or window_samples < 1:
        raise DataError("window and stride must be positive")
    raw, rate = _read_wav_pcm16_mono(path)
    if rate != sample_rate:
        raise SampleRateError(f"sample rate mismatch: file {rate} Hz, expected {sample_rate} Hz")
    scaled = raw.astype(np.float32) / 32768.0
    for start in range(0, len(scaled) - window_samples + 1, stride):
        yield AudioWindow(scaled[start:start + window_samples], sample_rate=rate)


def write_wav(path, samples, sample_rate=16000):
    """Write float samples in [-1, 1] as PCM16 mono (test/demo helper)."""
    pcm = np.clip(np.asarray(samples) * 32768.0, -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate,
                                    sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(body))
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------------------
# synthetic corpus

_F0_BAND_BASE = 90.0
_F0_BAND_STEP = 70.0
_F0_BAND_WIDTH = 40.0
_N_HARMONICS = 10
_AM_DEPTH = 0.5
_RES_BASE_HZ = 900.0
_RES_STEP_HZ = 450.0
_RES_RADIUS = 0.9


def f0_band(long_class):
    lo = _F0_BAND_BASE + _F0_BAND_STEP * long_class
    return lo, lo + _F0_BAND_WIDTH


def am_rate(long2_class):
    return 1.5 + 2.5 * long2_class


def _harmonic_templates(n_short, seed):
    # fundamental dominates every template so the f0 band stays the
    # strongest spectral line regardless of segment class
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E31]))
    templates = rng.uniform(0.05, 0.35, size=(n_short, _N_HARMONICS))
    templates[:, 0] = 1.0
    return templates


def _resonator_coeffs(long_class, sample_rate):
    # two-pole resonance normalized to unit gain at its center
    theta = 2.0 * math.pi * (_RES_BASE_HZ + _RES_STEP_HZ * long_class) / sample_rate
    a = np.array([1.0, -2.0 * _RES_RADIUS * math.cos(theta), _RES_RADIUS ** 2])
    w = np.exp(-1j * theta * np.arange(3))
    b0 = abs(np.dot(a, w))
    return np.array([b0]), a


def _segment_labels(cfg: SynthConfig, rng):
    lo = max(1, int(round(cfg.segment_ms[0] * cfg.sample_rate / 1000.0)))
    hi = max(lo, int(round(cfg.segment_ms[1] * cfg.sample_rate / 1000.0)))
    labels = np.empty(cfg.window_samples, dtype=np.int64)
    pos = 0
    prev = -1
    while pos < cfg.window_samples:
        length = int(rng.integers(lo, hi + 1))
        if cfg.n_short_classes == 1:
            cls = 0
        elif prev < 0:
            cls = int(rng.integers(cfg.n_short_classes))
        else:
            cls = int((prev + 1 + rng.integers(cfg.n_short_classes - 1)) % cfg.n_short_classes)
        labels[pos:pos + length] = cls
        prev = cls
        pos += length
    return labels


def _synth_window(cfg: SynthConfig, templates, rng):
    long_attr = int(rng.integers(cfg.n_long_classes))
    long2 = int(rng.integers(cfg.n_long2_classes))
    lo, hi = f0_band(long_attr)
    f0 = rng.uniform(lo, hi)
    short = _segment_labels(cfg, rng)

    t = np.arange(cfg.window_samples) / cfg.sample_rate
    phases = rng.uniform(0.0, 2.0 * math.pi, size=_N_HARMONICS)
    amps = templates[short].T  # [H, W]
    harmonics = np.arange(1, _N_HARMONICS + 1)
    keep = harmonics * f0 < 0.45 * cfg.sample_rate
    sig = np.zeros(cfg.window_samples)
    for h, ph, ok in zip(harmonics, phases, keep):
        if ok:
            sig += amps[h - 1] * np.sin(2.0 * math.pi * h * f0 * t + ph)
    sig *= 1.0 + _AM_DEPTH * np.sin(2.0 * math.pi * am_rate(long2) * t + rng.uniform(0, 2 * math.pi))
    b, a = _resonator_coeffs(long_attr, cfg.sample_rate)
    sig = lfilter(b, a, sig)
    if cfg.noise > 0:
        sig = sig + cfg.noise * sig.std() * rng.standard_normal(cfg.window_samples)
    peak = np.abs(sig).max()
    samples = (sig / peak * 0.95).astype(np.float32)
    return LabeledWindow(AudioWindow(samples, cfg.sample_rate), long_attr, long2, short)


def synth_generate(cfg: SynthConfig):
    """Generate the labeled corpus; bit-identical for a fixed seed."""
    cfg.validate()
    templates = _harmonic_templates(cfg.n_short_classes, cfg.seed)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_windows)
    return [_synth_window(cfg, templates, np.random.default_rng(s)) for s in seeds]


# ---------------------------------------------------------------------------
# frame-grid label alignment

def align_labels(labels, frame_hop):
    """Majority label per frame of `frame_hop` samples.

    The last partial frame is dropped; ties break toward the label whose
    segment starts earlier in the frame.
    """
    if frame_hop <= 0:
        raise DataError("frame_hop must be positive")
    labels = np.asarray(labels)
    n = labels.size // frame_hop
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        seg = labels[i * frame_hop:(i + 1) * frame_hop]
        counts = np.bincount(seg)
        best = counts.max()
        cands = np.flatnonzero(counts == best)
        if cands.size == 1:
            out[i] = cands[0]
        else:
            firsts = [np.argmax(seg == c) for c in cands]
            out[i] = cands[int(np.argmin(firsts))]
    return out


def runs_from_labels(labels):
    """Compress per-sample labels to (class, start, length) runs."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return [(int(labels[s]), int(s), int(e - s)) for s, e in zip(starts, ends)]


def labels_from_runs(runs, n_samples):
    labels = np.empty(n_samples, dtype=np.int64)
    covered = 0
    for cls, start, length in runs:
        labels[start:start + length] = cls
        covered += length
    if covered != n_samples:
        raise DataError("short_attr runs do not tile the window")
    return labels


# ---------------------------------------------------------------------------
# corpus container and on-disk format

@dataclass
class WindowRecord:
    id: int
    source: str
    long_attr: int | None
    long_attr2: int | None
    short_attr_runs: list = field(default_factory=list)

    def short_labels(self, n_samples):
        return labels_from_runs(self.short_attr_runs, n_samples)


@dataclass
class Corpus:
    windows: np.ndarray  # [n, W] float32
    records: list
    sample_rate: int = 16000

    def __len__(self):
        return len(self.records)

    @property
    def window_samples(self):
        return self.windows.shape[1]


def corpus_from_labeled(labeled, source="synth"):
    windows = np.stack([lw.window.samples for lw in labeled])
    records = [
        WindowRecord(i, source, lw.long_attr, lw.long_attr2,
                     [list(r) for r in lw.short_runs])
        for i, lw in enumerate(labeled)
    ]
    rate = labeled[0].window.sample_rate if labeled else 16000
    return Corpus(windows, records, sample_rate=rate)


def save_corpus(corpus: Corpus, out_dir):
    """Write manifest JSONL plus raw windows as little-endian float32."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "corpus.jsonl"
    with manifest.open("w") as fh:
        meta = {"n_windows": len(corpus), "window_samples": corpus.window_samples,
                "sample_rate": corpus.sample_rate}
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for r in corpus.records:
            rec = {"id": r.id, "source": r.source, "long_attr": r.long_attr,
                   "long_attr2": r.long_attr2, "short_attr_runs": r.short_attr_runs}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "windows.f32").write_bytes(
        np.ascontiguousarray(corpus.windows, dtype="<f4").tobytes())
    return manifest, out / "windows.f32"


def load_corpus(in_dir) -> Corpus:
    src = Path(in_dir)
    manifest = src / "corpus.jsonl"
    if not manifest.exists():
        raise DataError(f"no corpus manifest in {src}")
    records = []
    meta = None
    with manifest.open() as fh:
        for line in fh:
            obj = json.loads(line)
            if "meta" in obj:
                meta = obj["meta"]
                continue
            records.append(WindowRecord(
                obj["id"], obj["source"], obj["long_attr"], obj["long_attr2"],
                [list(map(int, r)) for r in obj["short_attr_runs"]]))
    if meta is None:
        raise DataError("corpus manifest missing meta line")
    raw = np.frombuffer((src / "windows.f32").read_bytes(), dtype="<f4")
    n, W = meta["n_windows"], meta["window_samples"]
    if raw.size != n * W:
        raise DataError("windows.f32 size does not match manifest")
    return Corpus(raw.reshape(n, W).copy(), records, sample_rate=meta["sample_rate"])
