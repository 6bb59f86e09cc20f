"""Contrastive and relational objectives for local and global distillation.

All losses take embedding batches as :class:`~fedx.numerics.Tensor` rows and
average their per-anchor terms over the batch.  Embeddings produced by the
frozen global model (or an EMA target) are detached here, so no gradient can
reach them whatever the caller passes in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .numerics import (
    Tensor,
    as_tensor,
    clamp,
    concat,
    kl_divergence,
    exp,
    log_softmax,
    logsumexp,
    normalize_rows,
    pick,
    reshape,
    tsum,
)

DEFAULT_TAU = 0.1


def _rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        raise ValueError("expected a batch of embeddings (2-D), got a vector")
    return x


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _sims(a_unit: Tensor, b_unit: Tensor) -> Tensor:
    return clamp(a_unit @ b_unit.T, -1.0, 1.0)


def local_contrastive_simclr(z, z_aug, tau: float = DEFAULT_TAU) -> Tensor:
    """(2n-1)-way instance discrimination over a batch and its augmented view.

    Anchor ``z[i]`` is scored against ``z_aug[i]``; the denominator runs over
    every embedding of both batches except the anchor itself.
    """
    z, z_aug = _rows(z), _rows(z_aug)
    _check_tau(tau)
    n = z.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs n >= 2 (no negatives otherwise)")
    if z_aug.shape != z.shape:
        raise ValueError(f"view shapes differ: {z.shape} vs {z_aug.shape}")
    anchors = normalize_rows(z)
    everything = concat([anchors, normalize_rows(z_aug)], axis=0)
    logits = _sims(anchors, everything) * (1.0 / tau)
    mask = np.ones((n, 2 * n), dtype=logits.dtype)
    mask[np.arange(n), np.arange(n)] = 0
    positives = pick(logits, np.arange(n) + n)
    return (logsumexp(logits, axis=1, mask=mask) - positives).mean()


def local_contrastive_byol(pred, target) -> Tensor:
    """Mean squared distance between unit-normalised predictions and EMA targets."""
    pred, target = _rows(pred), _rows(target).detach()
    if pred.shape != target.shape:
        raise ValueError(f"prediction/target shapes differ: {pred.shape} vs {target.shape}")
    diff = normalize_rows(pred) - normalize_rows(target)
    return tsum(diff * diff, axis=1).mean()


@dataclass
class RelationVector:
    """Softmax relation of anchors to a reference batch, kept in log space."""

    log_probs: Tensor
    tau: float

    @property
    def probs(self) -> Tensor:
        return exp(self.log_probs)

    def __len__(self) -> int:
        return self.log_probs.shape[-1]


def relationship_vector(anchor, refs, tau: float = DEFAULT_TAU) -> RelationVector:
    """Softmax over ``sim(anchor, ref_j) / tau`` for every reference row.

    ``anchor`` may be one vector or a batch of anchors (one relation row each).
    """
    _check_tau(tau)
    anchor, refs = as_tensor(anchor), _rows(refs)
    if refs.shape[0] < 1:
        raise ValueError("reference batch is empty")
    single = anchor.ndim == 1
    if single:
        anchor = reshape(anchor, (1, -1))
    logits = _sims(normalize_rows(anchor), normalize_rows(refs)) * (1.0 / tau)
    logp = log_softmax(logits, axis=1)
    if single:
        logp = logp[0]
    return RelationVector(logp, tau)


ProbLike = Union[RelationVector, Tensor, np.ndarray, list]


def _probs(r: ProbLike) -> Tensor:
    return r.probs if isinstance(r, RelationVector) else as_tensor(r)


def relational_loss(r: ProbLike, r_aug: ProbLike) -> Tensor:
    """Jensen-Shannon divergence between two relation distributions.

    ``0.5 KL(r || m) + 0.5 KL(r_aug || m)`` with ``m = (r + r_aug) / 2``.
    The mixture ``m`` is treated as a constant target.  For 2-D inputs the
    per-row divergences are averaged.
    """
    p, q = _probs(r), _probs(r_aug)
    if p.shape != q.shape:
        raise ValueError(f"relation vectors differ in length: {p.shape} vs {q.shape}")
    target = Tensor(0.5 * (p.data + q.data))
    jsd = 0.5 * kl_divergence(p, target) + 0.5 * kl_divergence(q, target)
    return jsd.mean() if jsd.ndim else jsd


def global_contrastive(z_local, z_global_aug, z_global, tau: float = DEFAULT_TAU,
                       include_positive: bool = False) -> Tensor:
    """Contrast projected local embeddings against the frozen global model.

    The positive for anchor ``z_local[i]`` is ``z_global_aug[i]``.  Negatives
    are the other local anchors and the other global embeddings of the
    un-augmented batch.  The positive itself is not in the denominator unless
    ``include_positive`` is set, which gives the textbook InfoNCE form.
    """
    zl, zga, zg = _rows(z_local), _rows(z_global_aug).detach(), _rows(z_global).detach()
    _check_tau(tau)
    n = zl.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs n >= 2 (no negatives otherwise)")
    if not zl.shape == zga.shape == zg.shape:
        raise ValueError(f"shape mismatch: {zl.shape}, {zga.shape}, {zg.shape}")
    anchors = normalize_rows(zl)
    zga_unit = normalize_rows(zga)
    positives = clamp(tsum(anchors * zga_unit, axis=1), -1.0, 1.0) * (1.0 / tau)
    parts = [_sims(anchors, anchors), _sims(anchors, normalize_rows(zg))]
    mask = np.ones((n, 2 * n), dtype=zl.dtype)
    mask[np.arange(n), np.arange(n)] = 0
    mask[np.arange(n), np.arange(n) + n] = 0
    logits = concat(parts, axis=1) * (1.0 / tau)
    if include_positive:
        logits = concat([logits, reshape(positives, (-1, 1))], axis=1)
        mask = np.concatenate([mask, np.ones((n, 1), dtype=mask.dtype)], axis=1)
    return (logsumexp(logits, axis=1, mask=mask) - positives).mean()


def global_relationship_vectors(z_local, z_local_aug, z_global_refs,
                                tau: float = DEFAULT_TAU) -> tuple[RelationVector, RelationVector]:
    """Relations of both local projected views to the detached global references."""
    refs = _rows(z_global_refs).detach()
    return relationship_vector(z_local, refs, tau), relationship_vector(z_local_aug, refs, tau)


def total_local_kd(contrastive, relational):
    return contrastive + relational


def total_global_kd(contrastive, relational):
    return contrastive + relational


def total_kd(local_kd, global_kd):
    return local_kd + global_kd
