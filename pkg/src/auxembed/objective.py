"""Similarity measures and the contrastive criterion.

The loss scores one positive pair per reference against a set of negatives
shared by the whole batch, via a log-sum-exp of temperature-scaled
similarities. The log-sum-exp subtracts the per-row maximum for stability;
the shift is treated as a constant in the backward pass, so gradients equal
those of the unstabilized formula.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIMILARITY_KINDS = ("dot", "neg_mse")
_NORM_TOL = 1e-6


@dataclass(frozen=True)
class LossReport:
    """total = positive_term + negative_term (alignment / uniformity split,
    both shifted by the detached per-row maximum)."""

    total: float
    positive_term: float
    negative_term: float


def similarity(z, z2, kind="dot"):
    """Pairwise row similarity: ``dot`` on unit vectors or ``neg_mse``.

    ``dot`` rejects rows whose norm strays from 1 by more than 1e-6.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    if z.shape[1] != z2.shape[1]:
        raise ValueError(f"dimension mismatch: {z.shape[1]} vs {z2.shape[1]}")
    if kind == "dot":
        for name, arr in (("left", z), ("right", z2)):
            norms = np.linalg.norm(arr, axis=1)
            if np.any(np.abs(norms - 1.0) > _NORM_TOL):
                raise ValueError(f"{name} argument of dot similarity is not unit-norm")
        out = np.sum(z * z2, axis=1)
    elif kind == "neg_mse":
        d = z - z2
        out = -np.sum(d * d, axis=1)
    else:
        raise ValueError(f"unknown similarity kind {kind!r}")
    return out if out.size > 1 else float(out[0])


def scores(ref, pos, neg, temperature, kind="dot"):
    """Temperature-scaled similarities: (pos_scores (B,), neg_scores (B, n))."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    ref = np.asarray(ref, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if kind == "dot":
        scaled = ref / temperature  # fold 1/tau into the small factor
        p = np.einsum("bd,bd->b", scaled, pos)
        n = scaled @ neg.T
    elif kind == "neg_mse":
        p = -np.sum((ref - pos) ** 2, axis=1) / temperature
        n = -(np.sum(ref * ref, axis=1)[:, None]
              - 2.0 * ref @ neg.T + np.sum(neg * neg, axis=1)[None, :]) / temperature
    else:
        raise ValueError(f"unknown similarity kind {kind!r}")
    return p, n


def infonce_from_scores(pos_scores, neg_scores, with_grads=False):
    """Core criterion on precomputed scaled similarities.

    mean over the batch of ``-psi_pos + log sum_j exp(psi_neg_j)``; the
    per-row max of the negative scores is subtracted inside the log-sum-exp
    and treated as constant in the backward pass.
    """
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.atleast_2d(np.asarray(neg_scores, dtype=np.float64))
    if not (np.all(np.isfinite(pos_scores)) and np.all(np.isfinite(neg_scores))):
        raise ValueError("non-finite similarity scores")
    c = neg_scores.max(axis=1)
    shifted = neg_scores - c[:, None]
    np.exp(shifted, out=shifted)
    row_sum = shifted.sum(axis=1)
    pos_term = float(np.mean(c - pos_scores))
    neg_term = float(np.mean(np.log(row_sum)))
    report = LossReport(pos_term + neg_term, pos_term, neg_term)
    if not with_grads:
        return report
    b = pos_scores.shape[0]
    shifted /= (row_sum * b)[:, None]  # softmax / b, reusing the buffer
    return report, (-np.ones_like(pos_scores) / b, shifted)


def infonce_loss(ref, pos, neg, temperature=1.0, kind="dot", with_grads=False):
    """Criterion on embedded batches: ref/pos are (B, d), negatives (n, d)
    shared across the batch (the full B x n similarity matrix is scored).

    With ``with_grads`` also returns gradients w.r.t. ref, pos and neg.
    """
    ref = np.asarray(ref, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if ref.shape != pos.shape or ref.shape[1] != neg.shape[1]:
        raise ValueError(
            f"inconsistent shapes: ref {ref.shape}, pos {pos.shape}, neg {neg.shape}")
    p, n = scores(ref, pos, neg, temperature, kind)
    if not with_grads:
        return infonce_from_scores(p, n)
    report, (dp, dn) = infonce_from_scores(p, n, with_grads=True)
    if kind == "dot":
        dref = (dp[:, None] * pos + dn @ neg) / temperature
        dpos = dp[:, None] * ref / temperature
        dneg = dn.T @ ref / temperature
    else:  # neg_mse: dpsi/dref = -2 (ref - other) / tau
        dref = (dp[:, None] * (-2.0 * (ref - pos))
                + (-2.0) * (dn.sum(axis=1, keepdims=True) * ref - dn @ neg)) / temperature
        dpos = dp[:, None] * (2.0 * (ref - pos)) / temperature
        dneg = (-2.0) * (dn.sum(axis=0)[:, None] * neg - dn.T @ ref) / temperature
    return report, (dref, dpos, dneg)


def _slice_normalize(z, lo, hi):
    s = z[:, lo:hi]
    norms = np.linalg.norm(s, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm coordinate slice in hybrid loss")
    return s / norms, s, norms


def hybrid_loss(ref, pos_behavior, pos_time, neg, temperature, split,
                kind="dot", with_grads=False):
    """Partitioned-latent criterion.

    The first ``d_b`` coordinates are trained with behavior-conditioned
    positives, the remaining ``d_t`` with time-conditioned positives; each
    coordinate slice is re-normalized before the similarity so both
    sub-losses operate on a sphere. ``split = (d_b, d_t)`` with
    ``d_b + d_t = d``. A zero-width slice drops its sub-loss entirely.
    """
    ref = np.asarray(ref, dtype=np.float64)
    d_b, d_t = split
    d = ref.shape[1]
    if d_b < 0 or d_t < 0 or d_b + d_t != d:
        raise ValueError(f"split {split} does not partition dimension {d}")

    total = pos_sum = neg_sum = 0.0
    grads = [np.zeros_like(np.asarray(a, dtype=np.float64))
             for a in (ref, pos_behavior, pos_time, neg)]
    parts = []
    if d_b > 0:
        parts.append((0, d_b, pos_behavior, 1))
    if d_t > 0:
        parts.append((d_b, d, pos_time, 2))
    for lo, hi, pos, pos_slot in parts:
        zr, sr, nr = _slice_normalize(ref, lo, hi)
        zp, sp, npo = _slice_normalize(np.asarray(pos, dtype=np.float64), lo, hi)
        zn, sn, nn = _slice_normalize(np.asarray(neg, dtype=np.float64), lo, hi)
        if not with_grads:
            rep = infonce_loss(zr, zp, zn, temperature, kind)
        else:
            rep, (dzr, dzp, dzn) = infonce_loss(zr, zp, zn, temperature, kind,
                                                with_grads=True)
            for slot, dz, z, norms in ((0, dzr, zr, nr), (pos_slot, dzp, zp, npo),
                                       (3, dzn, zn, nn)):
                # chain through the slice re-normalization
                grads[slot][:, lo:hi] += (dz - z * np.sum(z * dz, axis=1,
                                                          keepdims=True)) / norms
        total += rep.total
        pos_sum += rep.positive_term
        neg_sum += rep.negative_term
    report = LossReport(total, pos_sum, neg_sum)
    if not with_grads:
        return report
    return report, tuple(grads)
