"""Training and unlearning losses.

Contrastive terms work on L2-normalised token embeddings. The forget loss
treats each forget token as an anchor: same-class tokens are pushed away and
different-class tokens pulled in, each negative competing alone against the
whole same-class set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Batch, DataError
from .model import ModelConfig, classify, encode_batch
from .rng import Rng

log = logging.getLogger(__name__)


class PoolError(ValueError):
    """A contrast pool cannot support the requested loss."""


def token_cross_entropy(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-likelihood of gold labels over unmasked tokens."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n_cls = logits.shape[-1]
    live = labels[mask]
    if live.size and (live.min() < 0 or live.max() >= n_cls):
        raise DataError(f"label outside [0, {n_cls})")
    safe = np.where(mask, labels, 0)
    count = int(mask.sum())
    if count == 0:
        raise DataError("no unmasked tokens")
    gold = ag.take_along_last(ag.log_softmax(logits), safe)
    return ag.scale(ag.sum(ag.mul(gold, mask.astype(np.float64))), -1.0 / count)


def supcon_loss(embeddings: Tensor, labels, tau: float) -> Tensor:
    """Supervised contrastive loss, averaged over anchors.

    Every row is an anchor; its candidates are all other rows and its
    positives the other rows sharing its label.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = np.asarray(labels)
    n = labels.shape[0]
    others = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & others
    n_pos = pos.sum(1)
    if (n_pos == 0).any():
        raise PoolError(f"anchors without positives: {np.flatnonzero(n_pos == 0).tolist()}")
    z = ag.l2_normalize(embeddings)
    sim = ag.scale(ag.matmul(z, ag.transpose(z)), 1.0 / tau)
    lse = ag.masked_logsumexp(sim, others, axis=1)
    pos_mean = ag.sum(ag.mul(sim, pos / n_pos[:, None]), axis=1)
    return ag.scale(ag.sum(ag.sub(lse, pos_mean)), 1.0 / n)


@dataclass
class ContrastPool:
    """Union-batch embeddings plus, per anchor, its same/different-label sets."""

    embeddings: Tensor      # [n, d], raw; normalised inside the loss
    labels: np.ndarray      # [n]
    anchors: np.ndarray     # [A] row indices into embeddings
    same: np.ndarray        # [A, n] bool, the D_y sets
    diff: np.ndarray        # [A, n] bool, the D_not_y sets
    tau: float
    skipped: int = 0

    @property
    def num_anchors(self) -> int:
        return int(self.anchors.size)


def forget_loss_from_scores(scores: Tensor, same, diff) -> Tensor:
    """Forget loss from scaled similarities ``scores[a, i] = z_a.z_i / tau``.

    Sum over anchors of the mean over different-label rows ``i`` of
    ``log(exp(s_i) + sum_same exp(s_j)) - s_i``.
    """
    same = np.asarray(same, dtype=bool)
    diff = np.asarray(diff, dtype=bool)
    bad_same = np.flatnonzero(~same.any(1))
    bad_diff = np.flatnonzero(~diff.any(1))
    if bad_same.size or bad_diff.size:
        raise PoolError(f"anchors with empty same-label set {bad_same.tolist()} "
                        f"or empty different-label set {bad_diff.tolist()}")
    lse_same = ag.masked_logsumexp(scores, same, axis=1)
    a = scores.shape[0]
    per_pair = ag.sub(ag.logaddexp(scores, ag.reshape(lse_same, (a, 1))), scores)
    weights = diff / diff.sum(1, keepdims=True)
    return ag.sum(ag.mul(per_pair, weights))


def forget_loss(pool: ContrastPool) -> Tensor:
    if pool.tau <= 0:
        raise ValueError("tau must be positive")
    if pool.num_anchors == 0:
        return Tensor(0.0)
    z = ag.l2_normalize(pool.embeddings)
    za = ag.index_rows(z, pool.anchors)
    scores = ag.scale(ag.matmul(za, ag.transpose(z)), 1.0 / pool.tau)
    return forget_loss_from_scores(scores, pool.same, pool.diff)


@dataclass
class LossBreakdown:
    combined: Tensor
    ce_retained: float
    forget_loss: float
    gamma: float
    anchors: int = 0
    skipped: int = 0

    def as_dict(self) -> dict:
        return {"combined": float(self.combined.item()), "ce_retained": self.ce_retained,
                "forget_loss": self.forget_loss, "gamma": self.gamma,
                "anchors": self.anchors, "skipped": self.skipped}


def combined_objective(ce_retained: Tensor, pool: ContrastPool | None, gamma: float,
                       tokens: int = 1) -> LossBreakdown:
    """``ce_retained + gamma * forget_loss(pool) / tokens``.

    ``ce_retained`` is a per-token mean. Summed cross-entropy plus a summed
    forget loss keeps its relative weighting only if both terms are divided
    by the same count, so callers pass the retained token count here and the
    recorded ``forget_loss`` is the divided value.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if tokens < 1:
        raise ValueError(f"tokens must be >= 1, got {tokens}")
    lf = forget_loss(pool) if pool is not None else Tensor(0.0)
    if tokens != 1:
        lf = ag.scale(lf, 1.0 / tokens)
    combined = ce_retained if gamma == 0 else ag.add(ce_retained, ag.scale(lf, gamma))
    return LossBreakdown(combined, ce_retained.item(), lf.item(), gamma,
                         pool.num_anchors if pool else 0, pool.skipped if pool else 0)


# ---------------------------------------------------------------------------
# views and pools

@dataclass
class DualViews:
    """Two dropout views of one batch; rows are unmasked tokens in batch order."""

    first: Tensor         # [B, T, d], the view the classifier consumes
    second: Tensor        # [B, T, d]
    first_rows: Tensor    # [n, d]
    second_rows: Tensor   # [n, d]
    labels: np.ndarray    # [n]

    @property
    def num_rows(self) -> int:
        return 2 * int(self.labels.size)


def token_rows(z: Tensor, mask) -> Tensor:
    bsz, width, d = z.shape
    flat = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    return ag.index_rows(ag.reshape(z, (bsz * width, d)), flat)


def dual_dropout_views(cfg: ModelConfig, params: Mapping[str, Tensor], batch: Batch,
                       rng_first: Rng, rng_second: Rng, train: bool = True) -> DualViews:
    """Encode a batch twice with independent dropout masks.

    The first view draws from ``rng_first`` exactly as a plain training step
    would, so the classifier branch is unchanged by adding the second view.
    """
    if not train:
        raise ValueError("dual views need train mode; in eval mode both views are identical")
    z1 = encode_batch(cfg, params, batch.ids, batch.mask, True, rng_first)
    z2 = encode_batch(cfg, params, batch.ids, batch.mask, True, rng_second)
    return DualViews(z1, z2, token_rows(z1, batch.mask), token_rows(z2, batch.mask),
                     batch.labels[batch.mask])


def build_contrast_pool(forget: DualViews, retained: DualViews | None, tau: float,
                        outside: int | None) -> ContrastPool:
    """Pool over the union batch with anchors at forget tokens of entity classes.

    Both views of each such token act as anchors. An anchor's own two views
    never enter its sets. Anchors whose label has no other instance in the
    union batch are dropped and counted in ``skipped``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    parts = [forget.first_rows, forget.second_rows]
    labels = [forget.labels, forget.labels]
    nf = forget.labels.size
    groups = [np.arange(nf), np.arange(nf)]
    if retained is not None:
        nr = retained.labels.size
        parts += [retained.first_rows, retained.second_rows]
        labels += [retained.labels, retained.labels]
        groups += [nf + np.arange(nr), nf + np.arange(nr)]
    lab = np.concatenate(labels)
    grp = np.concatenate(groups)
    emb = ag.concat(parts, axis=0)

    is_entity = forget.labels != outside if outside is not None else np.ones(nf, bool)
    cand = np.concatenate([np.flatnonzero(is_entity), nf + np.flatnonzero(is_entity)])
    not_self = grp[None, :] != grp[cand][:, None]
    same = (lab[None, :] == lab[cand][:, None]) & not_self
    diff = lab[None, :] != lab[cand][:, None]
    ok = same.any(1) & diff.any(1)
    skipped = int((~ok).sum())
    if skipped:
        log.debug("dropping %d anchors without same- or different-label partners", skipped)
    return ContrastPool(emb, lab, cand[ok], same[ok], diff[ok], tau, skipped)


def forward_logits(cfg: ModelConfig, params: Mapping[str, Tensor], batch: Batch, train: bool,
                   rng: Rng | None) -> Tensor:
    return classify(params, encode_batch(cfg, params, batch.ids, batch.mask, train, rng))
