"""Retrieval evaluation: CMC Rank-k and mAP over query/gallery splits."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError


@dataclass
class RetrievalResult:
    cmc: dict  # k -> Rank-k accuracy
    map: float
    ap: np.ndarray
    n_query: int
    n_gallery: int

    @property
    def rank1(self):
        return self.cmc[1]

    def to_dict(self, seed=None):
        return {
            "rank1": float(self.cmc[1]),
            "rank5": float(self.cmc[5]),
            "rank10": float(self.cmc[10]),
            "map": float(self.map),
            "n_query": int(self.n_query),
            "n_gallery": int(self.n_gallery),
            "seed": seed,
        }


def distance_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def rank_and_score(query, query_labels, gallery, gallery_labels, ks=(1, 5, 10)):
    """Rank the gallery for every query by Euclidean distance and score it.

    Ties in distance keep gallery order. Rank-k counts a query as correct when
    any of its top-k gallery items shares its identity; k larger than the
    gallery is clamped. AP averages the precision at the rank of each correct
    match.
    """
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    present = set(gallery_labels.tolist())
    for lab in query_labels:
        if lab not in present:
            raise EvaluationError(f"query identity {lab} is absent from the gallery")
    dist = distance_matrix(query, gallery)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gallery_labels[order] == query_labels[:, None]
    first_hit = matches.argmax(axis=1)
    n_gallery = len(gallery_labels)
    cmc = {k: float(np.mean(first_hit < min(k, n_gallery))) for k in ks}
    hits = np.cumsum(matches, axis=1)
    ranks = np.arange(1, n_gallery + 1)
    precision = hits / ranks
    ap = (precision * matches).sum(axis=1) / matches.sum(axis=1)
    return RetrievalResult(cmc, float(ap.mean()), ap, len(query_labels), n_gallery)


def query_gallery_split(labels, rng=None):
    """Single-gallery-shot split: one gallery image per identity, the rest are queries.

    Returns ``(query_idx, gallery_idx)``; with ``rng=None`` the first image of
    every identity goes to the gallery.
    """
    labels = np.asarray(labels)
    gallery = []
    for ident in np.unique(labels):
        pool = np.flatnonzero(labels == ident)
        if len(pool) < 2:
            raise EvaluationError(f"identity {ident} needs at least two images")
        gallery.append(pool[0] if rng is None else rng.choice(pool))
    gallery = np.sort(np.array(gallery))
    query = np.setdiff1d(np.arange(len(labels)), gallery)
    return query, gallery


def evaluate_domain(model, domain, rng=None):
    emb = model.extract(domain.images)
    q, g = query_gallery_split(domain.labels, rng)
    return rank_and_score(emb[q], domain.labels[q], emb[g], domain.labels[g])


def evaluate_targets(model, domains, seed=None):
    """Average metrics over held-out domains, each evaluated on its own gallery."""
    if not domains:
        raise EvaluationError("no target domains to evaluate")
    rng = None if seed is None else np.random.default_rng(seed)
    results = [evaluate_domain(model, d, rng) for d in domains]
    cmc = {k: float(np.mean([r.cmc[k] for r in results])) for k in results[0].cmc}
    return RetrievalResult(
        cmc=cmc,
        map=float(np.mean([r.map for r in results])),
        ap=np.concatenate([r.ap for r in results]),
        n_query=sum(r.n_query for r in results),
        n_gallery=sum(r.n_gallery for r in results),
    ), results


def write_metrics(result, path, seed=None):
    with open(path, "w") as fh:
        json.dump(result.to_dict(seed), fh, indent=2, sort_keys=True)
        fh.write("\n")
