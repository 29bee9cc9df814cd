"""Minibatch training loop: Adam on the summed stage losses.

Batches are drawn uniformly with replacement, negatives per the sampling
policy; metrics go to a CSV, state to checksummed checkpoint containers
that round-trip bit-exactly (parameters, moments, counter, RNG state).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import container
from . import model as md
from . import numerics as nm
from .numerics import NonFiniteError, Tensor
from .objective import NegativeSamplingPolicy, total_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainerError(Exception):
    pass


class TrainingDiverged(TrainerError):
    pass


def adam_update(p, g, m, v, t, lr, b1=ADAM_BETA1, b2=ADAM_BETA2, eps=ADAM_EPS):
    """One Adam step with bias correction at count t (1-based)."""
    dt = p.dtype.type
    m = dt(b1) * m + dt(1 - b1) * g
    v = dt(b2) * v + dt(1 - b2) * (g * g)
    m_hat = m / dt(1.0 - b1 ** t)
    v_hat = v / dt(1.0 - b2 ** t)
    return p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps)), m, v


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    n_updates: int = 1000
    pred_steps: int | None = None  # None: use the model's head count
    n_negatives: int | None = None  # None: pool-sized N capped at 128
    neg_source: str = "mixed"
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    eval_every: int = 0
    precision: str = "float32"
    grad_clip: float | None = None
    stage_weights: tuple = (1.0, 1.0)
    log_wall_time: bool = True  # off for byte-reproducible metrics files

    def validate(self):
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.n_updates < 1:
            raise TrainerError("n_updates must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise TrainerError("precision must be float32 or float64")
        return self

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["stage_weights"] = list(self.stage_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainerError(f"unknown train config keys: {sorted(unknown)}")
        if "stage_weights" in d:
            d = dict(d, stage_weights=tuple(d["stage_weights"]))
        return cls(**d).validate()

    def policy(self):
        return NegativeSamplingPolicy(n_negatives=self.n_negatives, source=self.neg_source)


@dataclass
class TrainState:
    model: md.Model
    cfg: TrainConfig
    m: dict = field(default_factory=dict)  # Adam first moments by name
    v: dict = field(default_factory=dict)  # Adam second moments by name
    update: int = 0
    rng: np.random.Generator = None

    @classmethod
    def init(cls, model_cfg: md.ModelConfig, cfg: TrainConfig):
        cfg.validate()
        model = md.build_model(model_cfg, seed=cfg.seed, precision=cfg.precision)
        m = {name: np.zeros_like(p.data) for name, p in model.named_parameters()}
        v = {name: np.zeros_like(p.data) for name, p in model.named_parameters()}
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
        return cls(model=model, cfg=cfg, m=m, v=v, update=0, rng=rng)


def _norm_dump(state: TrainState, grads=None):
    lines = []
    for name, p in state.model.named_parameters():
        entry = f"  {name}: |param|={float(np.linalg.norm(p.data)):.4g}"
        if grads is not None:
            entry += f" |grad|={float(np.linalg.norm(grads[p])):.4g}"
        lines.append(entry)
    return "\n".join(lines)


def train_step(state: TrainState, batch):
    """One forward/backward/Adam update; returns the metrics dict."""
    cfg = state.cfg
    batch = np.asarray(batch, dtype=cfg.precision)
    if batch.ndim != 2 or batch.shape[0] != cfg.batch_size:
        raise TrainerError(f"batch shape {batch.shape} != ({cfg.batch_size}, W)")
    t0 = time.perf_counter()
    x = Tensor(batch)
    try:
        with nm.Tape() as tape:
            out = md.forward(state.model, x)
            loss, metrics = total_loss(state.model, out, cfg.policy(), state.rng,
                                       n_steps=cfg.pred_steps,
                                       stage_weights=tuple(cfg.stage_weights))
        if not np.isfinite(loss.data):
            raise NonFiniteError("loss is non-finite")
        grads = tape.backward(loss)
    except NonFiniteError as e:
        raise TrainingDiverged(
            f"update {state.update}: {e}\nlayer norms:\n{_norm_dump(state)}") from e

    if cfg.grad_clip is not None:
        total = np.sqrt(sum(float(np.sum(grads[p] ** 2)) for p in state.model.parameters()))
        if total > cfg.grad_clip:
            factor = state.model.dtype.type(cfg.grad_clip / total)
            scaled = {id(p): grads[p] * factor for p in state.model.parameters()}
            grads = nm.Gradients(scaled)

    t = state.update + 1
    for name, p in state.model.named_parameters():
        p.data, state.m[name], state.v[name] = adam_update(
            p.data, grads[p], state.m[name], state.v[name], t, cfg.learning_rate)
    state.update = t
    metrics["wall_ms"] = (time.perf_counter() - t0) * 1000.0
    return metrics


def evaluate(state: TrainState, batch, sample_seed=0):
    """Loss/accuracy on a fixed batch without updating; negatives reseeded."""
    batch = np.asarray(batch, dtype=state.cfg.precision)
    out = md.forward(state.model, Tensor(batch))
    rng = np.random.default_rng(np.random.SeedSequence([state.cfg.seed, 0xEA1, sample_seed]))
    _, metrics = total_loss(state.model, out, state.cfg.policy(), rng,
                            n_steps=state.cfg.pred_steps,
                            stage_weights=tuple(state.cfg.stage_weights))
    metrics["wall_ms"] = 0.0
    return metrics


# ---------------------------------------------------------------------------
# metrics CSV

def _metric_columns(n_steps):
    cols = ["update", "L", "L_lower", "L_upper"]
    cols += [f"acc_k{k}" for k in range(1, n_steps + 1)]
    cols += [f"upper_acc_k{k}" for k in range(1, n_steps + 1)]
    cols.append("wall_ms")
    return cols


def _metric_row(update, metrics, n_steps, log_wall_time):
    def fmt(x):
        return repr(float(x))

    row = [str(update), fmt(metrics["L"]), fmt(metrics["L_lower"])]
    row.append(fmt(metrics["L_upper"]) if "L_upper" in metrics else "")
    for key in ("acc", "upper_acc"):
        per_k = metrics.get(key, {})
        row += [fmt(per_k[k]) if k in per_k else "" for k in range(1, n_steps + 1)]
    row.append(fmt(metrics["wall_ms"]) if log_wall_time else fmt(0.0))
    return row


def fit(model_cfg: md.ModelConfig, cfg: TrainConfig, windows, out_dir,
        eval_windows=None, resume_from=None):
    """Run n_updates steps over the corpus; write metrics and checkpoints.

    Returns (state, paths dict). With resume_from, continues the exact
    trajectory of the interrupted run (same seed, same batches).
    """
    cfg.validate()
    windows = np.asarray(windows)
    if windows.ndim != 2 or windows.shape[0] < 1:
        raise TrainerError("corpus must be a non-empty [n_windows, W] array")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.model.dtype.name != cfg.precision:
            raise TrainerError("resume precision differs from checkpoint")
        state.cfg = cfg
    else:
        state = TrainState.init(model_cfg, cfg)
    n_steps = cfg.pred_steps or state.model.cfg.pred_steps
    cols = _metric_columns(n_steps)

    metrics_path = out / "metrics.csv"
    eval_path = out / "metrics_eval.csv"
    paths = {"metrics": metrics_path, "checkpoints": []}
    if cfg.eval_every and eval_windows is None:
        eval_windows = windows[:cfg.batch_size]

    with metrics_path.open("w", newline="") as fh_train:
        train_writer = csv.writer(fh_train)
        train_writer.writerow(cols)
        eval_fh = eval_writer = None
        if cfg.eval_every:
            eval_fh = eval_path.open("w", newline="")
            eval_writer = csv.writer(eval_fh)
            eval_writer.writerow(cols)
            paths["metrics_eval"] = eval_path
        try:
            while state.update < cfg.n_updates:
                idx = state.rng.integers(0, windows.shape[0], size=cfg.batch_size)
                metrics = train_step(state, windows[idx])
                train_writer.writerow(_metric_row(state.update, metrics, n_steps,
                                                  cfg.log_wall_time))
                if cfg.eval_every and state.update % cfg.eval_every == 0:
                    em = evaluate(state, eval_windows, sample_seed=state.update)
                    eval_writer.writerow(_metric_row(state.update, em, n_steps,
                                                     cfg.log_wall_time))
                if cfg.checkpoint_every and state.update % cfg.checkpoint_every == 0:
                    p = out / f"checkpoint_{state.update:06d}.hccm"
                    save_checkpoint(state, p)
                    paths["checkpoints"].append(p)
        finally:
            if eval_fh is not None:
                eval_fh.close()
    final = out / "checkpoint.hccm"
    save_checkpoint(state, final)
    paths["checkpoints"].append(final)
    return state, paths


# ---------------------------------------------------------------------------
# train-state checkpointing

def save_checkpoint(state: TrainState, path):
    """Bit-exact container: parameters, Adam moments, counter, RNG state."""
    rng_state = state.rng.bit_generator.state
    header = {
        "kind": "train_state",
        "config": state.model.cfg.to_dict(),
        "train_config": state.cfg.to_dict(),
        "precision": state.model.dtype.name,
        "update": state.update,
        "rng": rng_state,
    }
    arrays = [(name, p.data) for name, p in state.model.named_parameters()]
    arrays += [(f"adam.m.{name}", a) for name, a in state.m.items()]
    arrays += [(f"adam.v.{name}", a) for name, a in state.v.items()]
    container.save_container(path, header, arrays)


def load_checkpoint(path) -> TrainState:
    header, arrays = container.load_container(path)
    if header.get("kind") != "train_state":
        raise TrainerError(f"{path} is not a training checkpoint")
    cfg = TrainConfig.from_dict(header["train_config"])
    model = md.model_from_arrays(header, arrays)
    m = {}
    v = {}
    for name, _ in model.named_parameters():
        try:
            m[name] = arrays[f"adam.m.{name}"]
            v[name] = arrays[f"adam.v.{name}"]
        except KeyError as e:
            raise container.CorruptFileError(f"checkpoint missing moment {e}") from e
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return TrainState(model=model, cfg=cfg, m=m, v=v, update=header["update"], rng=rng)
