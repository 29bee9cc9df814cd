"""Frozen-feature attribute probes.

Features come from a trained model (latents or contexts on their frame
grids, optionally mean-pooled per window); probes are multinomial
logistic regression or a one-hidden-layer MLP, trained by full-batch
gradient descent with early stopping on a validation split. Splits are
always by window id, never by frame.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import model as md
from . import numerics as nm

SOURCES = ("z_s", "c_s", "z_l", "c_l", "c_s&c_l")
TARGETS = ("long_attr", "long_attr2", "short_attr")
KINDS = ("linear", "mlp-1-hidden")
POOLINGS = ("per-frame", "mean-utterance")


class ProbeError(Exception):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    source: str = "c_l"
    target: str = "long_attr"
    kind: str = "linear"
    pooling: str = "per-frame"

    def validate(self):
        base = self.source[:-3] if self.source.endswith("+dm") else self.source
        if base not in SOURCES:
            raise ProbeError(f"unknown feature source {self.source!r}")
        if self.target not in TARGETS:
            raise ProbeError(f"unknown target {self.target!r}")
        if self.kind not in KINDS:
            raise ProbeError(f"unknown probe kind {self.kind!r}")
        if self.pooling not in POOLINGS:
            raise ProbeError(f"unknown pooling {self.pooling!r}")
        if self.target == "short_attr" and self.pooling != "per-frame":
            raise ProbeError("short_attr requires per-frame pooling")
        return self


@dataclass
class FeatureTable:
    """Feature rows with aligned labels; one row per frame or per window."""

    X: np.ndarray  # [rows, dim]
    window_ids: np.ndarray  # [rows]
    labels: dict  # target -> [rows] int labels, or None if unavailable
    frame_period_s: float
    source: str

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def frames_per_second(self):
        return 1.0 / self.frame_period_s


def worker_count():
    """Worker cap from HCC_THREADS (default 1: fully serial)."""
    try:
        return max(1, int(os.environ.get("HCC_THREADS", "1")))
    except ValueError:
        return 1


def _source_tensor(out: md.Outputs, source):
    if source == "z_s":
        return out.z_s
    if source == "c_s":
        return out.c_s
    if source == "c_s&c_l":
        if out.c_l is None:
            raise ProbeError("c_s&c_l needs the two-stage variant")
        return out.g
    if source == "z_l":
        t = out.z_l
    elif source == "c_l":
        t = out.c_l
    else:
        raise ProbeError(f"unknown feature source {source!r}")
    if t is None:
        raise ProbeError(f"source {source} needs the two-stage variant")
    return t


def extract_features(model: md.Model, corpus: ds.Corpus, source,
                     pooling="per-frame", batch_windows=16) -> FeatureTable:
    """Forward the corpus through a frozen model and tabulate one source.

    Rows are frames on the source's own grid (or windows when
    mean-pooled); short_attr labels are majority-aligned to that grid.
    """
    ProbeSpec(source=source).validate()
    if source in ("z_s", "c_s", "c_s&c_l"):
        hop = model.cfg.short_hop
    else:
        hop = model.cfg.long_hop
    W = corpus.window_samples
    n = len(corpus)
    chunks = [np.arange(i, min(i + batch_windows, n)) for i in range(0, n, batch_windows)]

    def run_chunk(idx):
        out = md.forward(model, corpus.windows[idx])
        return _source_tensor(out, source).data

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            feats = list(pool.map(run_chunk, chunks))
    else:
        feats = [run_chunk(idx) for idx in chunks]
    feats = np.concatenate(feats, axis=0)  # [n, T, D]
    T = feats.shape[1]

    has_long = all(r.long_attr is not None for r in corpus.records)
    if pooling == "mean-utterance":
        X = feats.mean(axis=1)
        ids = np.arange(n)
        labels = {
            "long_attr": np.array([r.long_attr for r in corpus.records]) if has_long else None,
            "long_attr2": np.array([r.long_attr2 for r in corpus.records]) if has_long else None,
            "short_attr": None,
        }
    else:
        X = feats.reshape(n * T, -1)
        ids = np.repeat(np.arange(n), T)
        labels = {"long_attr": None, "long_attr2": None, "short_attr": None}
        if has_long:
            labels["long_attr"] = np.repeat([r.long_attr for r in corpus.records], T)
            labels["long_attr2"] = np.repeat([r.long_attr2 for r in corpus.records], T)
            short = [ds.align_labels(r.short_labels(W), hop)[:T] for r in corpus.records]
            labels["short_attr"] = np.concatenate(short)
    rate = corpus.sample_rate
    return FeatureTable(X=X, window_ids=ids, labels=labels,
                        frame_period_s=hop / rate, source=source)


# ---------------------------------------------------------------------------
# splits

def split_by_windows(window_ids, fractions=(0.7, 0.1, 0.2), seed=0):
    """Masks for train/val/test, split by window id so no window leaks."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ProbeError("split fractions must sum to 1")
    ids = np.unique(window_ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5117]))
    perm = rng.permutation(ids)
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = {"train": set(perm[:n_train].tolist()),
             "val": set(perm[n_train:n_train + n_val].tolist()),
             "test": set(perm[n_train + n_val:].tolist())}
    return {name: np.isin(window_ids, sorted(members))
            for name, members in parts.items()}


# ---------------------------------------------------------------------------
# probe fitting

def _raw_logits(weights, kind, Xs):
    if kind == "linear":
        return Xs @ weights["W"].T + weights["b"]
    h = np.maximum(Xs @ weights["W1"].T + weights["b1"], 0.0)
    return h @ weights["W2"].T + weights["b2"]


@dataclass
class Probe:
    kind: str
    classes: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    weights: dict
    final_train_loss: float
    epochs_run: int
    converged: bool

    def logits(self, X):
        Xs = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        return _raw_logits(self.weights, self.kind, Xs)

    def predict(self, X):
        return self.classes[np.argmax(self.logits(X), axis=1)]


def _ce_loss_and_grads(params, Xs, y_idx, kind):
    X = nm.Tensor(Xs)
    with nm.Tape() as tape:
        if kind == "linear":
            logits = nm.affine(X, params["W"], params["b"])
        else:
            hidden = nm.relu(nm.affine(X, params["W1"], params["b1"]))
            logits = nm.affine(hidden, params["W2"], params["b2"])
        loss = nm.reduce_mean(nm.sub(nm.log_sum_exp(logits), nm.take_indices(logits, y_idx)))
    return loss, tape.backward(loss)


def _ce_loss(logits, y_idx):
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y_idx)), y_idx]))


def fit_probe(features, labels, kind="linear", seed=0, validation=None,
              lr=0.5, max_epochs=500, patience=25, hidden=256):
    """Train a probe by full-batch gradient descent.

    validation is an optional (X_val, y_val) pair for early stopping;
    without it the last 15% of a seeded row shuffle is held out. Reports
    (not raises) non-convergence via Probe.converged.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ProbeError(f"features {X.shape} and labels {y.shape} do not align")
    if not np.all(np.isfinite(X)):
        raise ProbeError("features must be finite")
    classes = np.unique(y)
    if classes.size < 2:
        raise ProbeError("need >= 2 classes to fit a probe")

    if validation is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF17]))
        perm = rng.permutation(X.shape[0])
        n_val = max(1, int(0.15 * X.shape[0]))
        fit_idx, val_idx = perm[n_val:], perm[:n_val]
        X_fit, y_fit = X[fit_idx], y[fit_idx]
        X_val, y_val = X[val_idx], y[val_idx]
    else:
        X_fit, y_fit = X, y
        X_val, y_val = validation
        X_val = np.asarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val)

    mean = X_fit.mean(axis=0)
    std = np.maximum(X_fit.std(axis=0), 1e-8)
    Xs = (X_fit - mean) / std
    Xsv = (X_val - mean) / std
    class_index = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([class_index[c] for c in y_fit])
    yv_idx = np.array([class_index.get(c, -1) for c in y_val])
    if np.any(yv_idx < 0):
        raise ProbeError("validation labels contain classes absent from training")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0]))
    C, D = classes.size, X.shape[1]
    if kind == "linear":
        params = {"W": nm.param(rng.normal(size=(C, D)) * 0.01, name="W"),
                  "b": nm.param(np.zeros(C), name="b")}
    elif kind == "mlp-1-hidden":
        params = {"W1": nm.param(rng.normal(size=(hidden, D)) * (1.0 / np.sqrt(D)), name="W1"),
                  "b1": nm.param(np.zeros(hidden), name="b1"),
                  "W2": nm.param(rng.normal(size=(C, hidden)) * 0.01, name="W2"),
                  "b2": nm.param(np.zeros(C), name="b2")}
    else:
        raise ProbeError(f"unknown probe kind {kind!r}")

    def val_loss():
        arrs = {k: p.data for k, p in params.items()}
        return _ce_loss(_raw_logits(arrs, kind, Xsv), yv_idx)

    best = np.inf
    best_params = {k: p.data.copy() for k, p in params.items()}
    bad = 0
    prev_train = np.inf
    step = lr
    epochs = 0
    train_loss = np.inf
    for epoch in range(max_epochs):
        loss, grads = _ce_loss_and_grads(params, Xs, y_idx, kind)
        train_loss = float(loss.data)
        if train_loss > prev_train + 1e-12:
            step = max(step * 0.5, 1e-4)  # plain GD: back off when overshooting
        prev_train = train_loss
        for p in params.values():
            p.data = p.data - step * grads[p]
        epochs = epoch + 1
        vl = val_loss()
        if vl < best - 1e-7:
            best = vl
            best_params = {k: p.data.copy() for k, p in params.items()}
            bad = 0
        else:
            bad += 1
            if bad > patience:
                break
    converged = bad > patience or train_loss < 1e-6
    return Probe(kind=kind, classes=classes, mean=mean, std=std,
                 weights=best_params, final_train_loss=train_loss,
                 epochs_run=epochs, converged=converged)


def eval_probe(probe: Probe, features, labels):
    """Accuracy and confusion counts (rows true, columns predicted)."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.shape[1] != probe.mean.shape[0]:
        raise ProbeError(f"feature dim {X.shape[1]} does not match probe")
    class_index = {c: i for i, c in enumerate(probe.classes)}
    unknown = set(np.unique(y)) - set(probe.classes.tolist())
    if unknown:
        raise ProbeError(f"labels {sorted(unknown)} unseen during training")
    pred = probe.predict(X)
    C = probe.classes.size
    confusion = np.zeros((C, C), dtype=np.int64)
    for t, p in zip(y, pred):
        confusion[class_index[t], class_index[p]] += 1
    accuracy = float(np.trace(confusion) / max(1, confusion.sum()))
    return accuracy, confusion


@dataclass
class ProbeResult:
    spec: ProbeSpec
    dim: int
    frames_per_second: float
    train_accuracy: float
    test_accuracy: float
    confusion: np.ndarray
    n_train: int
    n_test: int
    converged: bool


def run_probe(spec: ProbeSpec, table: FeatureTable, seed=0,
              fractions=(0.7, 0.1, 0.2), max_rows=None, **fit_kw) -> ProbeResult:
    """Split by window, fit on train with val early stopping, score test."""
    spec.validate()
    y = table.labels.get(spec.target)
    if y is None:
        raise ProbeError(f"table has no {spec.target} labels")
    masks = split_by_windows(table.window_ids, fractions, seed)
    tr, va, te = masks["train"], masks["val"], masks["test"]
    X_tr, y_tr = table.X[tr], y[tr]
    if max_rows is not None and X_tr.shape[0] > max_rows:
        sub = np.random.default_rng(np.random.SeedSequence([seed, 0x5AB])).permutation(
            X_tr.shape[0])[:max_rows]
        X_tr, y_tr = X_tr[sub], y_tr[sub]
    probe = fit_probe(X_tr, y_tr, kind=spec.kind, seed=seed,
                      validation=(table.X[va], y[va]), **fit_kw)
    train_acc, _ = eval_probe(probe, X_tr, y_tr)
    test_acc, confusion = eval_probe(probe, table.X[te], y[te])
    return ProbeResult(spec=spec, dim=table.dim,
                       frames_per_second=table.frames_per_second,
                       train_accuracy=train_acc, test_accuracy=test_acc,
                       confusion=confusion, n_train=int(y_tr.shape[0]),
                       n_test=int(te.sum()), converged=probe.converged)


REPORT_COLUMNS = ["source", "target", "kind", "pooling", "dim", "train_acc", "test_acc"]


def write_report(results, path):
    """One CSV row per probe, directly plottable into accuracy panels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in results:
            w.writerow([r.spec.source, r.spec.target, r.spec.kind, r.spec.pooling,
                        str(r.dim), repr(r.train_accuracy), repr(r.test_accuracy)])
    return path
