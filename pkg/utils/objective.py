"""Training objective: label-smoothed cross-entropy plus semi-hard triplet terms for each branch."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .error_handler import ConfigurationError, UsageError
from .tensor_core import Tensor, add, monitoring_kinks, record_op, report_kink

logger = logging.getLogger(__name__)


def _check_labels(labels: Sequence[int], batch: int, num_classes: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise UsageError(f"Expected {batch} labels, got {labels.shape[0] if labels.ndim else 0}")
    if num_classes is not None and labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError(f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def lsr_cross_entropy(logits: Tensor, labels: Sequence[int], epsilon: float = 0.1) -> Tensor:
    """Mean cross-entropy against (1 - epsilon) one-hot + epsilon / K smoothed targets"""
    if logits.ndim != 2:
        raise UsageError(f"lsr_cross_entropy expects B x K logits, got shape {logits.shape}")
    if not 0 <= epsilon < 1:
        raise UsageError(f"epsilon must lie in [0, 1), got {epsilon}")
    batch, num_classes = logits.shape
    labels = _check_labels(labels, batch, num_classes)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full(logits.shape, epsilon / num_classes, dtype=logits.data.dtype)
    target[np.arange(batch), labels] += 1.0 - epsilon
    loss = -(target * log_probs).sum() / batch

    def _backward(g):
        return (g * (np.exp(log_probs) - target) / batch,)

    return record_op('lsr_cross_entropy', (logits,), np.asarray(loss, dtype=logits.data.dtype), _backward)


def pairwise_sq_distances(emb: Tensor) -> Tensor:
    """B x B squared Euclidean distances: symmetric, zero diagonal, clamped at 0"""
    if emb.ndim != 2:
        raise UsageError(f"pairwise_sq_distances expects a B x d matrix, got shape {emb.shape}")
    x = emb.data
    gram = x @ x.T
    gram = (gram + gram.T) / 2
    sq = np.diag(gram)
    raw = sq[:, None] + sq[None, :] - 2 * gram
    active = raw > 0
    np.fill_diagonal(active, False)
    D = np.where(active, raw, 0.0).astype(x.dtype)

    def _backward(g):
        S = g * active
        weights = S.sum(axis=1) + S.sum(axis=0)
        return (2 * (weights[:, None] * x - (S + S.T) @ x),)

    return record_op('pairwise_sq_distances', (emb,), D, _backward)


@dataclass
class TripletSet:
    """(anchor, positive, negative) batch indices with the distances they were mined at"""
    triplets: List[Tuple[int, int, int]] = field(default_factory=list)
    ap_distances: List[float] = field(default_factory=list)
    an_distances: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triplets)

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.triplets:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty
        a, p, n = (np.asarray(col, dtype=np.int64) for col in zip(*self.triplets))
        return a, p, n


def mine_semihard(D: Union[Tensor, np.ndarray], labels: Sequence[int], r: int = 10) -> TripletSet:
    """Up to r semi-hard negatives per ordered anchor-positive pair.

    Negatives j qualify when label_j != label_a and D[a, p] < D[a, j]; they are taken
    in ascending distance, lower batch index first on ties. Pairs without a
    qualifying negative contribute nothing.
    """
    if r < 1:
        raise UsageError(f"r must be >= 1, got {r}")
    distances = D.data if isinstance(D, Tensor) else np.asarray(D)
    batch = distances.shape[0]
    labels = _check_labels(labels, batch)
    mined = TripletSet()
    closest_gap = np.inf

    for a in range(batch):
        row = distances[a]
        negatives = np.flatnonzero(labels != labels[a])
        for p in np.flatnonzero(labels == labels[a]):
            if p == a:
                continue
            d_ap = row[p]
            if negatives.size:
                closest_gap = min(closest_gap, float(np.min(np.abs(row[negatives] - d_ap))))
            qualifying = negatives[row[negatives] > d_ap]
            if not qualifying.size:
                continue
            order = np.lexsort((qualifying, row[qualifying]))
            for j in qualifying[order][:r]:
                mined.triplets.append((a, int(p), int(j)))
                mined.ap_distances.append(float(d_ap))
                mined.an_distances.append(float(row[j]))

    if monitoring_kinks() and np.isfinite(closest_gap):
        report_kink(closest_gap)
    return mined


def triplet_loss(D: Tensor, triplets: TripletSet, tau: float = 1.0) -> Tensor:
    """Mean hinge [D_ap - D_an + tau]_+ over the mined triplets; 0 when there are none"""
    if tau <= 0:
        raise ConfigurationError(f"Triplet margin tau must be positive, got {tau}")
    dtype = D.data.dtype
    if not len(triplets):
        return record_op('triplet_loss', (D,), np.zeros((), dtype=dtype), lambda g: (np.zeros_like(D.data),))

    a, p, n = triplets.as_arrays()
    margins = D.data[a, p] - D.data[a, n] + tau
    if monitoring_kinks():
        report_kink(float(np.min(np.abs(margins))))
    active = (margins > 0).astype(dtype)
    count = len(triplets)
    loss = np.asarray((margins * active).sum() / count, dtype=dtype)

    def _backward(g):
        grad = np.zeros_like(D.data)
        share = g * active / count
        np.add.at(grad, (a, p), share)
        np.add.at(grad, (a, n), -share)
        return (grad,)

    return record_op('triplet_loss', (D,), loss, _backward)


@dataclass
class LossBreakdown:
    ce_G: float = 0.0
    tri_G: float = 0.0
    ce_L: float = 0.0
    tri_L: float = 0.0
    total: float = 0.0
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)
    triplets_G: int = 0
    triplets_L: int = 0

    def as_dict(self) -> Dict[str, float]:
        return {'ce_G': self.ce_G, 'tri_G': self.tri_G, 'ce_L': self.ce_L,
                'tri_L': self.tri_L, 'total': self.total}


def branch_losses(logits: Tensor, embeddings: Tensor, labels: Sequence[int], epsilon: float,
                  r: int, tau: float) -> Tuple[Tensor, Tensor, int]:
    ce = lsr_cross_entropy(logits, labels, epsilon)
    D = pairwise_sq_distances(embeddings)
    mined = mine_semihard(D, labels, r)
    return ce, triplet_loss(D, mined, tau), len(mined)


def total_loss(outputs, labels: Sequence[int], cfg) -> LossBreakdown:
    """Sum of both branches' cross-entropy and triplet terms; absent branches contribute 0.

    `cfg` needs epsilon_lsr, r and tau.
    """
    breakdown = LossBreakdown()
    terms = []
    if outputs.logits_G is not None:
        ce, tri, breakdown.triplets_G = branch_losses(outputs.logits_G, outputs.f_G, labels,
                                                      cfg.epsilon_lsr, cfg.r, cfg.tau)
        breakdown.ce_G, breakdown.tri_G = ce.item(), tri.item()
        terms += [ce, tri]
    if outputs.logits_L is not None:
        ce, tri, breakdown.triplets_L = branch_losses(outputs.logits_L, outputs.f_L, labels,
                                                      cfg.epsilon_lsr, cfg.r, cfg.tau)
        breakdown.ce_L, breakdown.tri_L = ce.item(), tri.item()
        terms += [ce, tri]
    if not terms:
        raise UsageError("total_loss needs at least one branch with classification logits")

    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    breakdown.tensor = total
    breakdown.total = ((breakdown.ce_G + breakdown.tri_G) + breakdown.ce_L) + breakdown.tri_L
    return breakdown


def pk_sample(person_ids: Sequence[int], v: int, batch: int, rng: np.random.Generator) -> List[int]:
    """v distinct identities with batch / v samples each, as positions into `person_ids`.

    Identities with fewer than batch / v samples are drawn with replacement.
    """
    if v < 1 or batch % v:
        raise ConfigurationError(f"batch {batch} must be a positive multiple of v={v}")
    person_ids = np.asarray(person_ids)
    identities = np.unique(person_ids)
    if identities.size < v:
        raise ConfigurationError(f"PK sampling needs at least v={v} identities, the split has {identities.size}")
    per_id = batch // v
    chosen = rng.choice(identities, size=v, replace=False)
    indices = []
    for pid in chosen:
        pool = np.flatnonzero(person_ids == pid)
        picks = rng.choice(pool, size=per_id, replace=pool.size < per_id)
        indices.extend(int(i) for i in picks)
    return indices
