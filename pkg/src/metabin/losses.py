"""Training objectives for the base update and the meta-learning episode.

All metric losses read pre-neck embeddings and use plain Euclidean distance.
Hard mining resolves ties to the lowest batch index.
"""

import numpy as np

from .autograd import Tensor, functional as F
from .errors import BatchCompositionError, ContractError, NumericError


def _labels(values, n, name):
    arr = np.asarray(values)
    if arr.shape != (n,):
        raise ContractError(f"{name} must have shape ({n},), got {arr.shape}")
    return arr


def cross_entropy_smoothed(logits, labels, epsilon=0.1):
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / M``."""
    n, m = logits.shape
    labels = _labels(labels, n, "labels").astype(np.intp)
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"epsilon must lie in [0, 1), got {epsilon}")
    if m < 2:
        raise ContractError("cross-entropy needs at least two classes")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise IndexError(f"label out of range for {m} classes")
    target = np.full((n, m), epsilon / m)
    target[np.arange(n), labels] += 1.0 - epsilon
    return -F.sum(F.log_softmax(logits, axis=1) * target) / n


def _anchor_masks(labels):
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(len(labels), dtype=bool)
    return positive, ~same


def batch_hard_triplet(embeddings, labels, margin=0.3):
    """Batch-hard triplet loss: farthest positive, nearest negative per anchor."""
    n = embeddings.shape[0]
    labels = _labels(labels, n, "labels")
    positive, negative = _anchor_masks(labels)
    for name, mask in (("positive", positive), ("negative", negative)):
        missing = np.flatnonzero(~mask.any(axis=1))
        if missing.size:
            raise BatchCompositionError(f"anchor {int(missing[0])} has no {name} in the batch")
    dist = F.pairwise_distance(embeddings)
    d_pos, _ = F.max_select(dist, axis=1, mask=positive)
    d_neg, _ = F.min_select(dist, axis=1, mask=negative)
    return F.mean(F.relu(d_pos - d_neg + margin))


def intra_domain_scatter(embeddings, domains):
    """Mean cosine similarity between each feature and its domain centroid."""
    n = embeddings.shape[0]
    domains = _labels(domains, n, "domains")
    total = None
    for k in np.unique(domains):
        idx = np.flatnonzero(domains == k)
        feats = F.take_rows(embeddings, idx)
        centroid = F.mean(feats, axis=0, keepdims=True)
        try:
            cos = F.cosine_similarity(feats, centroid, axis=1)
        except NumericError:
            raise NumericError(f"zero-norm feature or centroid in domain {int(k)}") from None
        part = F.sum(cos)
        total = part if total is None else total + part
    return total / n


def inter_domain_shuffle(embeddings, labels, domains):
    """softplus(d(anchor, nearest inter-domain negative) - d(anchor, nearest intra-domain negative))."""
    n = embeddings.shape[0]
    labels = _labels(labels, n, "labels")
    domains = _labels(domains, n, "domains")
    negative = labels[:, None] != labels[None, :]
    same_domain = domains[:, None] == domains[None, :]
    inter = negative & ~same_domain
    intra = negative & same_domain
    for name, mask in (("inter-domain negative", inter), ("intra-domain negative", intra)):
        missing = np.flatnonzero(~mask.any(axis=1))
        if missing.size:
            raise BatchCompositionError(f"anchor {int(missing[0])} has no {name} in the batch")
    dist = F.pairwise_distance(embeddings)
    d_inter, _ = F.min_select(dist, axis=1, mask=inter)
    d_intra, _ = F.min_select(dist, axis=1, mask=intra)
    return F.mean(F.softplus(d_inter - d_intra))


def base_loss(logits, embeddings, labels, epsilon=0.1, margin=0.3):
    """Cross-entropy on logits plus batch-hard triplet on embeddings.

    Returns ``(total, parts)`` where ``parts`` maps component names to floats.
    """
    ce = cross_entropy_smoothed(logits, labels, epsilon)
    tr = batch_hard_triplet(embeddings, labels, margin)
    return ce + tr, {"ce": ce.item(), "triplet": tr.item()}


def meta_train_loss(embeddings, labels, domains, margin=0.3, use_scatter=True, use_shuffle=True,
                    use_triplet=True):
    """Scatter + shuffle + triplet, each switchable for ablations.

    Returns ``(total, parts)``; disabled components report NaN.
    """
    parts = {"scatter": float("nan"), "shuffle": float("nan"), "triplet": float("nan")}
    terms = []
    if use_scatter:
        t = intra_domain_scatter(embeddings, domains)
        parts["scatter"] = t.item()
        terms.append(t)
    if use_shuffle:
        t = inter_domain_shuffle(embeddings, labels, domains)
        parts["shuffle"] = t.item()
        terms.append(t)
    if use_triplet:
        t = batch_hard_triplet(embeddings, labels, margin)
        parts["triplet"] = t.item()
        terms.append(t)
    if not terms:
        raise ContractError("meta-train loss needs at least one enabled component")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, parts


def combine(*components):
    """Unweighted sum of loss components (tensors or floats)."""
    total = components[0]
    for c in components[1:]:
        total = total + c
    return total if isinstance(total, Tensor) else float(total)
