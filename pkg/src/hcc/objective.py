"""InfoNCE scores and losses for both stages.

Scores are bilinear: for each anchor time t and step k, the candidate
latent z(t+k) is scored against a per-step linear prediction from the
conditioning vector (g for the lower stage, c_l for the upper). Scores
stay in the log domain; the exponential lives inside the softmax of the
loss for numerical stability. Per-(t, k) losses are averaged so the
magnitude is comparable across K and T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor


class ObjectiveError(Exception):
    pass


@dataclass
class NegativeSamplingPolicy:
    """Where negatives come from and how many.

    n_negatives None resolves to the candidate pool size (batch x frames)
    capped at 127 negatives (N = 128 candidates). Draws are uniform with
    replacement and never hit the positive position itself.
    """

    n_negatives: int | None = None
    source: str = "mixed"  # mixed | same-sequence | cross-batch

    def __post_init__(self):
        if self.source not in ("mixed", "same-sequence", "cross-batch"):
            raise ObjectiveError(f"unknown negative source {self.source!r}")
        if self.n_negatives is not None and self.n_negatives < 1:
            raise ObjectiveError("n_negatives must be >= 1")

    def resolve_n(self, batch_size: int, n_frames: int) -> int:
        if self.n_negatives is not None:
            return self.n_negatives + 1
        return min(128, batch_size * n_frames)


@dataclass
class ScoreMatrix:
    """Scores over candidates, one row per (anchor t, step k), positive at 0."""

    scores: Tensor  # [M, N]
    steps: np.ndarray  # [M] step k per row

    @property
    def n_candidates(self):
        return self.scores.shape[1]

    def validate(self):
        if self.scores.ndim != 2 or self.scores.shape[1] < 2:
            raise ObjectiveError("score matrix needs >= 2 candidates per row")
        if self.steps.shape != (self.scores.shape[0],):
            raise ObjectiveError("steps must label every score row")
        return self


def draw_candidate_indices(batch_size, n_frames, step, policy, rng):
    """Flat indices into the [batch * frames] latent pool, positive first.

    Row (b, t) gets index b * n_frames + (t + step) at column 0 and
    n_negatives draws per the policy; negatives exclude the positive
    position (same-sequence repeats of its value elsewhere may occur).
    """
    Tk = n_frames - step
    if Tk < 1:
        raise ObjectiveError(f"step {step} too large for {n_frames} frames")
    n = policy.resolve_n(batch_size, n_frames)
    n_neg = n - 1
    pos = (np.arange(batch_size)[:, None] * n_frames
           + np.arange(Tk)[None, :] + step).reshape(-1)
    rows = pos.size
    if policy.source == "mixed":
        if batch_size * n_frames < 2:
            raise ObjectiveError("candidate pool too small for negatives")
        neg = rng.integers(0, batch_size * n_frames - 1, size=(rows, n_neg))
        neg += neg >= pos[:, None]
    elif policy.source == "same-sequence":
        if n_frames < 2:
            raise ObjectiveError("same-sequence negatives need >= 2 frames")
        tpos = pos % n_frames
        off = rng.integers(0, n_frames - 1, size=(rows, n_neg))
        off += off >= tpos[:, None]
        neg = (pos // n_frames)[:, None] * n_frames + off
    else:  # cross-batch
        if batch_size < 2:
            raise ObjectiveError("cross-batch negatives need batch size >= 2")
        jb = rng.integers(0, batch_size - 1, size=(rows, n_neg))
        jb += jb >= (pos // n_frames)[:, None]
        jt = rng.integers(0, n_frames, size=(rows, n_neg))
        neg = jb * n_frames + jt
    return np.concatenate([pos[:, None], neg], axis=1)


def score_lower(z_target, w_k, g_t) -> float:
    """Bilinear log-score z^T W_s(k) g for a single anchor/candidate pair."""
    z = np.asarray(getattr(z_target, "data", z_target))
    w = np.asarray(getattr(w_k, "data", w_k))
    g = np.asarray(getattr(g_t, "data", g_t))
    if w.ndim != 2 or z.shape != (w.shape[0],) or g.shape != (w.shape[1],):
        raise ShapeError(f"score: z {z.shape}, W {w.shape}, g {g.shape} do not agree")
    return float(z @ w @ g)


def score_upper(z_target, w_k, c_l_t) -> float:
    """Upper-stage log-score z_l^T W_l(k) c_l; same bilinear form."""
    return score_lower(z_target, w_k, c_l_t)


def stage_scores(z: Tensor, cond: Tensor, heads, policy, rng, n_steps=None) -> ScoreMatrix:
    """Score matrices for every (t, k) of one stage.

    z and cond are [B, T, .] (or unbatched [T, .]); heads is the per-step
    weight list; steps with no feasible anchor (k >= T) contribute nothing.
    """
    if z.ndim == 2:
        z = nm.reshape(z, (1,) + z.shape)
    if cond.ndim == 2:
        cond = nm.reshape(cond, (1,) + cond.shape)
    B, T, C = z.shape
    if cond.shape[0] != B or cond.shape[1] != T:
        raise ShapeError(f"stage_scores: cond {cond.shape} does not match z {z.shape}")
    n_steps = len(heads) if n_steps is None else min(n_steps, len(heads))
    n = policy.resolve_n(B, T)
    pool = nm.reshape(z, (B * T, C))
    blocks = []
    steps = []
    for k in range(1, n_steps + 1):
        Tk = T - k
        if Tk < 1:
            continue
        idx = draw_candidate_indices(B, T, k, policy, rng)
        pred = nm.reshape(nm.affine(nm.slice_rows(cond, 0, Tk), heads[k - 1]),
                          (B * Tk, C))
        cand = nm.reshape(nm.gather_rows(pool, idx.reshape(-1)), (B * Tk, n, C))
        blocks.append(nm.rowwise_dot(pred, cand))
        steps.append(np.full(B * Tk, k, dtype=np.int64))
    if not blocks:
        raise ObjectiveError(f"no feasible prediction step for {T} frames")
    scores = blocks[0] if len(blocks) == 1 else nm.concat_rows(blocks)
    return ScoreMatrix(scores, np.concatenate(steps)).validate()


def infonce_loss(sm: ScoreMatrix) -> Tensor:
    """Mean over (t, k) of -log softmax(positive | candidates).

    Categorical cross entropy of picking the positive among N candidates,
    computed with overflow-safe log-sum-exp; always >= 0.
    """
    sm.validate()
    if not np.all(np.isfinite(sm.scores.data)):
        raise nm.NonFiniteError("infonce_loss: non-finite scores")
    lse = nm.log_sum_exp(sm.scores)
    pos = nm.take_indices(sm.scores, np.zeros(sm.scores.shape[0], dtype=np.int64))
    return nm.reduce_mean(nm.sub(lse, pos))


def positive_accuracy(sm: ScoreMatrix, per_step: bool = False):
    """Fraction of rows whose argmax is the positive; ties count as wrong."""
    sm.validate()
    s = sm.scores.data
    correct = s[:, 0] > s[:, 1:].max(axis=1)
    if not per_step:
        return float(correct.mean())
    return {int(k): float(correct[sm.steps == k].mean())
            for k in np.unique(sm.steps)}


def total_loss(m, out, policy, rng, n_steps=None, stage_weights=(1.0, 1.0)):
    """Summed stage losses plus per-stage logging metrics.

    The baseline variant has only the lower stage; upper-stage metrics are
    then absent from the returned dict.
    """
    sm_lo = stage_scores(out.z_s, out.g, m.heads_s, policy, rng, n_steps=n_steps)
    loss_lo = infonce_loss(sm_lo)
    metrics = {
        "L_lower": float(loss_lo.data),
        "acc": positive_accuracy(sm_lo, per_step=True),
        "N_lower": sm_lo.n_candidates,
    }
    if m.cfg.variant == "cognitive":
        sm_up = stage_scores(out.z_l, out.c_l, m.heads_l, policy, rng, n_steps=n_steps)
        loss_up = infonce_loss(sm_up)
        metrics["L_upper"] = float(loss_up.data)
        metrics["upper_acc"] = positive_accuracy(sm_up, per_step=True)
        metrics["N_upper"] = sm_up.n_candidates
        w_lo, w_up = stage_weights
        if (w_lo, w_up) == (1.0, 1.0):
            loss = nm.add(loss_lo, loss_up)
        else:
            loss = nm.add(nm.scale(loss_lo, w_lo), nm.scale(loss_up, w_up))
    else:
        loss = loss_lo
    metrics["L"] = float(loss.data)
    return loss, metrics
