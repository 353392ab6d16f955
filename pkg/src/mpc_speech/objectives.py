"""Predictive-coding objectives: masked reconstruction (MPC), shifted L1 (APC)
and InfoNCE (CPC)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

log = logging.getLogger(__name__)

NONE, ZERO, RANDOM, KEEP = 0, 1, 2, 3
ACTION_NAMES = {ZERO: "zero", RANDOM: "random", KEEP: "keep"}


@dataclass(frozen=True)
class MaskPolicy:
    select_ratio: float = 0.15
    p_zero: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.select_ratio < 1.0:
            raise ValueError(f"select_ratio must lie in (0, 1), got {self.select_ratio}")
        probs = (self.p_zero, self.p_random, self.p_keep)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"action probabilities must be non-negative and sum to 1, got {probs}")

    def num_selected(self, length: int) -> int:
        if length <= 0:
            return 0
        return max(1, math.floor(self.select_ratio * length))


@dataclass
class MaskPlan:
    """Mask decisions for one sequence.

    ``action[i]`` is one of NONE/ZERO/RANDOM/KEEP; ``source[i]`` is the
    replacement frame index for RANDOM positions and -1 elsewhere.
    """

    action: np.ndarray
    source: np.ndarray

    @property
    def length(self) -> int:
        return self.action.shape[0]

    @property
    def selected(self) -> np.ndarray:
        return self.action != NONE

    def describe(self) -> str:
        rows = []
        for pos in np.flatnonzero(self.selected):
            act = ACTION_NAMES[int(self.action[pos])]
            src = int(self.source[pos])
            rows.append(f"{pos}\t{act}\t{src if src >= 0 else '-'}")
        return "\n".join(rows)

    @classmethod
    def empty(cls, length: int) -> "MaskPlan":
        return cls(np.zeros(length, dtype=np.int64), np.full(length, -1, dtype=np.int64))


@dataclass
class PredictiveTargets:
    original: np.ndarray  # T' x D reconstruction target
    masked: np.ndarray  # T' x D encoder input
    plan: MaskPlan


def sample_mask_plan(length: int, policy: MaskPolicy, rng: Rng) -> MaskPlan:
    """Draw a fresh plan: choose positions without replacement, then an
    independent zero/random/keep action for each."""
    plan = MaskPlan.empty(length)
    k = policy.num_selected(length)
    if k == 0:
        return plan
    positions = np.sort(rng.choice(length, size=k, replace=False))
    u = rng.random(k)
    actions = np.where(u < policy.p_zero, ZERO,
                       np.where(u < policy.p_zero + policy.p_random, RANDOM, KEEP))
    plan.action[positions] = actions
    for pos in positions[actions == RANDOM]:
        if length == 1:
            plan.source[pos] = 0
            continue
        j = int(rng.integers(0, length - 1))
        plan.source[pos] = j + 1 if j >= pos else j
    return plan


def apply_mask(frames: np.ndarray, plan: MaskPlan) -> PredictiveTargets:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] != plan.length:
        raise ValueError(f"plan covers {plan.length} positions but sequence has {frames.shape[0]}")
    masked = frames.copy()
    masked[plan.action == ZERO] = 0.0
    rand = np.flatnonzero(plan.action == RANDOM)
    masked[rand] = frames[plan.source[rand]]
    return PredictiveTargets(frames, masked, plan)


def masked_l1(prediction: Tensor, original: np.ndarray, selected: np.ndarray) -> Tensor:
    """Mean absolute error over the elements of selected positions only.

    ``selected`` has the shape of ``prediction`` minus the feature axis.  The
    unselected rows are never read, so their values cannot affect the result.
    """
    if prediction.shape != original.shape:
        raise ValueError(f"prediction shape {prediction.shape} != target shape {original.shape}")
    idx = np.nonzero(selected)
    if idx[0].size == 0:
        log.warning("mask plan selected no positions; MPC loss is zero")
        return nx.scale(nx.tsum(prediction), 0.0)
    picked = nx.getitem(prediction, idx)
    diff = nx.absolute(nx.sub(picked, original[idx]))
    return nx.mean(diff)


def mpc_loss(prediction: Tensor, targets: PredictiveTargets) -> Tensor:
    return masked_l1(nx.as_tensor(prediction), targets.original, targets.plan.selected)


def apc_loss(x, y, n: int = 3, valid: np.ndarray | None = None, reduction: str = "sum") -> Tensor:
    """Sum over i of ``|x[i + n] - y[i]|`` (elementwise L1 on the overlap).

    Works on ``T x D`` or padded ``B x T x D`` inputs; ``valid`` (``B x T``)
    marks real frames.  ``reduction="mean"`` divides by the number of
    compared elements.
    """
    x, y = nx.as_tensor(x), nx.as_tensor(y)
    T = x.shape[-2]
    if not 1 <= n < T:
        raise ValueError(f"shift n={n} must satisfy 1 <= n < T={T}")
    if x.shape != y.shape:
        raise ValueError(f"x shape {x.shape} != y shape {y.shape}")
    diff = nx.absolute(nx.sub(x[..., n:, :], y[..., :T - n, :]))
    if valid is not None:
        keep = np.asarray(valid, dtype=bool)[..., n:]
        diff = nx.mul(diff, keep[..., None].astype(np.float64))
        count = keep.sum() * x.shape[-1]
    else:
        count = diff.size
    total = nx.tsum(diff)
    if reduction == "mean":
        return nx.scale(total, 1.0 / max(count, 1))
    return total


def infonce(scores: Tensor, positive: int | np.ndarray) -> Tensor:
    """``-log softmax(scores)[positive]`` averaged over leading rows.

    ``scores`` is ``N`` or ``R x N`` (one row of candidate scores per query).
    """
    scores = nx.as_tensor(scores)
    if scores.shape[-1] < 2:
        raise ValueError("InfoNCE needs at least two candidates")
    logp = nx.log_softmax(scores, axis=-1)
    if scores.ndim == 1:
        return nx.neg(logp[int(positive)])
    rows = np.arange(scores.shape[0])
    return nx.neg(nx.mean(logp[rows, np.asarray(positive)]))


def cpc_infonce_loss(context, candidates, positive_index: int, weight) -> Tensor:
    """InfoNCE with the log-bilinear score ``z^T W c``.

    ``context``: ``D_c``; ``candidates``: ``N x D_z``; ``weight``: ``D_z x D_c``.
    """
    c = nx.as_tensor(context)
    z = nx.as_tensor(candidates)
    w = nx.as_tensor(weight)
    if z.shape[0] < 2:
        raise ValueError("need N >= 2 candidates")
    wc = nx.matmul(w, nx.reshape(c, (c.shape[0], 1)))
    scores = nx.reshape(nx.matmul(z, wc), (z.shape[0],))
    return infonce(scores, positive_index)


def cpc_batch_loss(z: Tensor, c: Tensor, weights: list[Tensor], lengths: np.ndarray,
                   rng: Rng, num_candidates: int = 8) -> Tensor:
    """InfoNCE over every (utterance, t, k) with ``t + k`` inside the utterance.

    ``z``: ``B x T x D_z`` latents, ``c``: ``B x T x D_c`` contexts, one
    bilinear weight per offset ``k = 1..len(weights)``.  The positive is
    ``z[b, t + k]``; ``num_candidates - 1`` negatives are drawn uniformly from
    the other valid positions of the batch.
    """
    B, T, dz = z.shape
    flat_valid = np.concatenate([b * T + np.arange(int(L)) for b, L in enumerate(lengths)])
    zf = nx.reshape(z, (B * T, dz))
    losses = []
    for k, w in enumerate(weights, start=1):
        rows = [(b, t) for b, L in enumerate(lengths) for t in range(int(L) - k)]
        if not rows:
            continue
        bi = np.array([r[0] for r in rows])
        ti = np.array([r[1] for r in rows])
        pos_flat = bi * T + ti + k
        cand = np.empty((len(rows), num_candidates), dtype=np.int64)
        cand[:, 0] = pos_flat
        for r, p in enumerate(pos_flat):
            pool = flat_valid[flat_valid != p]
            cand[r, 1:] = pool[rng.integers(0, pool.size, size=num_candidates - 1)]
        ctx = c[bi, ti]  # R x D_c
        pred = nx.matmul(ctx, nx.transpose(w))  # R x D_z  (W c)
        cz = nx.getitem(zf, cand)  # R x N x D_z
        scores = nx.reshape(nx.matmul(cz, nx.reshape(pred, (len(rows), dz, 1))),
                            (len(rows), num_candidates))
        losses.append(infonce(scores, np.zeros(len(rows), dtype=np.int64)))
    if not losses:
        raise ValueError("utterances too short for any CPC prediction offset")
    total = losses[0]
    for extra in losses[1:]:
        total = nx.add(total, extra)
    return nx.scale(total, 1.0 / len(losses))
