"""Training objectives: region-wise contrastive loss, cross-entropy, co-training.

The contrastive batch holds region embeddings from two independently sampled
image groups ("query" and "anchor"), paired slot by slot.  Every unit-norm
embedding in the batch, from both sides and all anatomy classes, enters the
softmax denominator of every other embedding's term; the embedding itself is
excluded unless ``include_self`` is set.

Normalization: each anchor's term averages over its positives, anchors are
averaged within their anatomy class, and classes holding at least one
positive pair are averaged with weight 1/c_eff.  With this reading the loss
is nonnegative, zero in the single-positive trivial case, and tends to
log(#denominator terms) as the temperature grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPositiveError, ParameterError
from .region_head import RegionEmbedding
from .numerics import softmax


@dataclass
class ContrastiveBatch:
    query_groups: list  # list[list[RegionEmbedding]], one inner list per image
    anchor_groups: list  # same length; slot i pairs query_groups[i] with anchor_groups[i]
    tau: float = 0.1
    positive_mode: str = "all_pairs"  # or "paired"
    include_self: bool = False

    def flatten(self) -> list[RegionEmbedding]:
        """Query groups then anchor groups, each in listed order."""
        flat = []
        for g in self.query_groups:
            flat.extend(g)
        for g in self.anchor_groups:
            flat.extend(g)
        return flat


def _positive_matrix(batch: ContrastiveBatch, labels, sides, slots) -> np.ndarray:
    n = len(labels)
    same_label = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    if batch.positive_mode == "all_pairs":
        return same_label & not_self
    if batch.positive_mode == "paired":
        opposite = sides[:, None] != sides[None, :]
        same_slot = slots[:, None] == slots[None, :]
        return same_label & opposite & same_slot
    raise ParameterError(f"unknown positive_mode {batch.positive_mode!r}")


def region_contrastive_loss(batch: ContrastiveBatch):
    """Loss value plus analytic gradients w.r.t. every unit-norm embedding.

    Returns (loss, grads) where grads is a list of arrays aligned with
    ``batch.flatten()`` order.
    """
    if batch.tau <= 0:
        raise ParameterError(f"temperature must be positive, got {batch.tau}")
    if len(batch.query_groups) != len(batch.anchor_groups):
        raise ParameterError("query and anchor sides must have the same number of groups")
    embs: list[RegionEmbedding] = batch.flatten()
    n = len(embs)
    if n < 2:
        raise EmptyPositiveError("batch holds fewer than 2 region embeddings")
    labels = np.array([e.label for e in embs])
    sides = np.array([0] * sum(len(g) for g in batch.query_groups)
                     + [1] * sum(len(g) for g in batch.anchor_groups))
    slots = np.concatenate([np.full(len(g), i) for side in
                            (batch.query_groups, batch.anchor_groups)
                            for i, g in enumerate(side)])
    z = np.stack([e.z_norm for e in embs])

    pos = _positive_matrix(batch, labels, sides, slots)
    pos_counts = pos.sum(axis=1)
    anchors = pos_counts > 0
    if not anchors.any():
        raise EmptyPositiveError("no positive pair in the entire batch")

    sim = (z @ z.T) / batch.tau
    if not batch.include_self:
        np.fill_diagonal(sim, -np.inf)
    # per-row log-sum-exp with max subtraction
    row_max = sim.max(axis=1, keepdims=True)
    expd = np.exp(sim - row_max)
    denom = expd.sum(axis=1)
    lse = row_max[:, 0] + np.log(denom)
    softw = expd / denom[:, None]
    if not batch.include_self:
        np.fill_diagonal(softw, 0.0)

    # per-anchor term: mean over positives of (lse - sim_ap)
    mean_pos_sim = np.where(pos, sim, 0.0).sum(axis=1) / np.maximum(pos_counts, 1)
    per_anchor = np.where(anchors, lse - mean_pos_sim, 0.0)

    classes = np.unique(labels[anchors])
    c_eff = len(classes)
    coef = np.zeros(n)
    loss = 0.0
    for k in classes:
        members = anchors & (labels == k)
        t_k = int(members.sum())
        coef[members] = 1.0 / (c_eff * t_k)
        loss += per_anchor[members].sum() / (c_eff * t_k)

    # gradient w.r.t. scaled similarities, then back to embeddings
    g_sim = softw * coef[:, None]
    g_sim -= (pos / np.maximum(pos_counts, 1)[:, None]) * coef[:, None]
    grad_z = (g_sim + g_sim.T) @ z / batch.tau
    return float(loss), [grad_z[i] for i in range(n)]


def cross_entropy_loss(items: list):
    """Mean softmax cross-entropy over (logits, label) pairs.

    Returns (loss, grads) with one gradient array per item, already divided
    by the batch size.
    """
    if not items:
        raise ParameterError("cross_entropy_loss needs at least one item")
    n = len(items)
    loss = 0.0
    grads = []
    for logits, label in items:
        logits = np.asarray(logits, dtype=np.float64)
        c = logits.shape[0]
        if not 0 <= label < c:
            raise ParameterError(f"label {label} out of range [0, {c})")
        p = softmax(logits)
        loss += -np.log(max(p[label], 1e-300))
        g = p.copy()
        g[label] -= 1.0
        grads.append(g / n)
    return float(loss / n), grads


def cotrain_loss(contrastive: float, ce: float, lam: float = 1.0) -> float:
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    return contrastive + lam * ce
