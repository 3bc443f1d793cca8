"""Retrieval evaluation: Recall@K, R-Precision, MAP@R.

Rankings sort by descending cosine similarity with ties broken toward the
smaller gallery index. Metric reductions accumulate left to right in rank
order, so a plain per-pair re-implementation reproduces every value bit for
bit; the only vectorized step is the similarity matrix itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .core import normalize_rows
from .errors import ContractError
from .network import Mlp, forward


def embed_dataset(net: Mlp, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Run the network over features in chunks.

    The forward pass is bit-stable under chunking, so batch_size only
    affects memory use, never the result.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ContractError("features must be a 2-D array")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if feats.shape[0] == 0:
        if feats.shape[1] != net.input_dim:
            raise ContractError(
                f"features must have {net.input_dim} columns, got {feats.shape[1]}"
            )
        return np.zeros((0, net.embed_dim))
    chunks = []
    for start in range(0, feats.shape[0], batch_size):
        emb, _ = forward(net, feats[start:start + batch_size])
        chunks.append(emb)
    return np.concatenate(chunks, axis=0)


def rank_gallery(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by descending cosine similarity to the query."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ContractError("query must be a 1-D vector")
    g = np.asarray(gallery, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != q.shape[0]:
        raise ContractError("gallery must be 2-D with the query's dimension")
    if g.shape[0] == 0:
        raise ContractError("gallery must contain at least one item")
    qn, _ = normalize_rows(q[None, :], "query embedding")
    gn, _ = normalize_rows(g, "gallery embedding")
    sims = gn @ qn[0]
    return np.argsort(-sims, kind="stable")


@dataclass
class RetrievalReport:
    """Aggregate metrics plus the per-query values they average."""

    recall_at: Dict[int, float]
    r_precision: float
    map_at_r: float
    num_queries: int
    per_query_r_precision: np.ndarray
    per_query_map_at_r: np.ndarray


def _seq_mean(values) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


def evaluate(
    query_embeddings: np.ndarray,
    query_labels: np.ndarray,
    gallery_embeddings: Optional[np.ndarray] = None,
    gallery_labels: Optional[np.ndarray] = None,
    ks: Sequence[int] = (1, 2, 4, 8),
    same_set: bool = False,
) -> RetrievalReport:
    """Score retrieval of same-class gallery items for every query.

    same_set=True evaluates the query set against itself with each query's
    own entry excluded. Every query must have at least one relevant gallery
    item, and every K must fit in the usable gallery.
    """
    q_emb = np.asarray(query_embeddings, dtype=np.float64)
    q_lab = np.asarray(query_labels)
    if q_emb.ndim != 2 or q_lab.shape != (q_emb.shape[0],):
        raise ContractError("need one label per query embedding")
    if q_emb.shape[0] == 0:
        raise ContractError("need at least one query")
    q_lab = q_lab.astype(np.int64)
    if same_set:
        if gallery_embeddings is not None or gallery_labels is not None:
            raise ContractError("same_set evaluation takes no separate gallery")
        g_emb, g_lab = q_emb, q_lab
    else:
        if gallery_embeddings is None or gallery_labels is None:
            raise ContractError("separate-gallery evaluation needs gallery data")
        g_emb = np.asarray(gallery_embeddings, dtype=np.float64)
        g_lab = np.asarray(gallery_labels)
        if g_emb.ndim != 2 or g_lab.shape != (g_emb.shape[0],):
            raise ContractError("need one label per gallery embedding")
        if g_emb.shape[1] != q_emb.shape[1]:
            raise ContractError("query and gallery dimensions differ")
        g_lab = g_lab.astype(np.int64)

    ks = [int(k) for k in ks]
    usable = g_emb.shape[0] - (1 if same_set else 0)
    if not ks or len(set(ks)) != len(ks):
        raise ContractError("ks must be non-empty and distinct")
    if min(ks) < 1 or max(ks) > usable:
        raise ContractError(f"every K must lie in [1, {usable}]")

    qn, _ = normalize_rows(q_emb, "query embedding")
    gn, _ = normalize_rows(g_emb, "gallery embedding")
    sims = qn @ gn.T

    hits_at_k = {k: [] for k in ks}
    r_precisions = []
    map_at_rs = []
    for i in range(q_emb.shape[0]):
        order = np.argsort(-sims[i], kind="stable")
        if same_set:
            order = order[order != i]
        rel = g_lab[order] == q_lab[i]
        r = int(rel.sum())
        if r == 0:
            raise ContractError(f"class {int(q_lab[i])} has no relevant gallery items")
        for k in ks:
            hits_at_k[k].append(1.0 if rel[:k].any() else 0.0)
        top_r = rel[:r]
        r_precisions.append(float(top_r.sum()) / r)
        hits = 0
        ap = 0.0
        for rank, is_rel in enumerate(top_r, start=1):
            if is_rel:
                hits += 1
                ap += hits / rank
        map_at_rs.append(ap / r)

    return RetrievalReport(
        recall_at={k: _seq_mean(hits_at_k[k]) for k in ks},
        r_precision=_seq_mean(r_precisions),
        map_at_r=_seq_mean(map_at_rs),
        num_queries=q_emb.shape[0],
        per_query_r_precision=np.array(r_precisions),
        per_query_map_at_r=np.array(map_at_rs),
    )
