"""Proxy-based metric learning losses with exact analytic gradients.

Each loss returns its scalar value together with gradients w.r.t. the batch
embeddings and the (level-0) proxies. Similarity is always cosine; the
gradient of the normalization is folded in analytically. Both losses use
max-shifted log-sum-exp throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import normalize_rows
from .errors import ContractError

VALID_KINDS = ("nca", "anchor")


@dataclass(frozen=True)
class LossConfig:
    """Which base loss to use, plus the anchor loss scale and margin."""

    kind: str = "nca"
    alpha: float = 32.0
    delta: float = 0.1

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ContractError(f"loss kind must be one of {VALID_KINDS}, got {self.kind!r}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ContractError("alpha must be finite and > 0")
        if not (np.isfinite(self.delta) and self.delta >= 0):
            raise ContractError("delta must be finite and >= 0")


@dataclass
class LossOutput:
    """Scalar loss plus gradients; d_proxies rows the loss never touched are zero."""

    value: float
    d_embeddings: np.ndarray
    d_proxies: np.ndarray
    level_values: list | None = None  # unweighted per-level values (hierarchical loss only)


def _check_inputs(embeddings, labels, proxies):
    x = np.asarray(embeddings, dtype=np.float64)
    p = np.asarray(proxies, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or p.ndim != 2:
        raise ContractError("embeddings and proxies must be 2-D arrays")
    if x.shape[1] != p.shape[1]:
        raise ContractError(
            f"embedding dim {x.shape[1]} != proxy dim {p.shape[1]}"
        )
    if x.shape[0] < 1:
        raise ContractError("batch must contain at least one sample")
    if p.shape[0] < 2:
        raise ContractError("need at least two proxies (the non-target set must be non-empty)")
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise ContractError("labels must be a vector with one entry per embedding row")
    if not np.issubdtype(y.dtype, np.integer):
        y = y.astype(np.int64)
        if not np.array_equal(y, np.asarray(labels)):
            raise ContractError("labels must be integers")
    if y.min() < 0 or y.max() >= p.shape[0]:
        raise ContractError("labels must index the proxy rows")
    return x, y.astype(np.int64), p


def _cosine_grads(g, u, q, s, x_norms, p_norms):
    """Push gradient g on the similarity matrix back to raw inputs.

    ds/dx = (q - s*u)/|x| and ds/dp = (u - s*q)/|p|, applied row-wise.
    """
    row_dot = (g * s).sum(axis=1, keepdims=True)
    d_emb = (g @ q - row_dot * u) / x_norms[:, None]
    col_dot = (g * s).sum(axis=0)
    d_prox = (g.T @ u - col_dot[:, None] * q) / p_norms[:, None]
    return d_emb, d_prox


def proxy_nca_loss(embeddings, labels, proxies) -> LossOutput:
    """NCA-style proxy loss, summed over the batch.

    Per sample: -s(x, p_target) + logsumexp over the similarities to the
    non-target proxies. The target proxy is excluded from the denominator,
    so negative values are legal.
    """
    x, y, p = _check_inputs(embeddings, labels, proxies)
    u, x_norms = normalize_rows(x, "embedding")
    q, p_norms = normalize_rows(p, "proxy")
    s = u @ q.T
    batch = np.arange(x.shape[0])

    masked = s.copy()
    masked[batch, y] = -np.inf
    m = masked.max(axis=1)
    lse = m + np.log(np.exp(masked - m[:, None]).sum(axis=1))
    value = float((-s[batch, y] + lse).sum())

    g = np.exp(masked - lse[:, None])  # softmax over non-target columns
    g[batch, y] = -1.0
    d_emb, d_prox = _cosine_grads(g, u, q, s, x_norms, p_norms)
    return LossOutput(value, d_emb, d_prox)


def proxy_anchor_loss(embeddings, labels, proxies, cfg: LossConfig) -> LossOutput:
    """Anchor-style proxy loss.

    Proxies act as anchors: each proxy with a positive sample in the batch
    pulls its positives (softplus of max-shifted exponentials), and every
    proxy pushes the batch samples of other classes. If no proxy has a
    positive in the batch, the positive term is zero.
    """
    if cfg.kind != "anchor":
        raise ContractError(f"expected an anchor loss config, got kind={cfg.kind!r}")
    x, y, p = _check_inputs(embeddings, labels, proxies)
    u, x_norms = normalize_rows(x, "embedding")
    q, p_norms = normalize_rows(p, "proxy")
    s = u @ q.T
    num_proxies = p.shape[0]
    pos_mask = y[:, None] == np.arange(num_proxies)[None, :]

    # Positive term, averaged over proxies that have a positive in the batch.
    z_pos = np.where(pos_mask, -cfg.alpha * (s - cfg.delta), -np.inf)
    m_pos = np.maximum(z_pos.max(axis=0), 0.0)
    e_pos = np.exp(z_pos - m_pos[None, :])
    denom_pos = np.exp(-m_pos) + e_pos.sum(axis=0)
    with_positives = pos_mask.any(axis=0)
    n_pb = int(with_positives.sum())
    if n_pb > 0:
        pos_value = float((m_pos + np.log(denom_pos))[with_positives].sum()) / n_pb
        g_pos = (-cfg.alpha / n_pb) * (e_pos / denom_pos[None, :])
    else:
        pos_value = 0.0
        g_pos = np.zeros_like(s)

    # Negative term, averaged over all proxies; empty negative sets give
    # log(1 + 0) = 0 and contribute nothing.
    z_neg = np.where(~pos_mask, cfg.alpha * (s + cfg.delta), -np.inf)
    m_neg = np.maximum(z_neg.max(axis=0), 0.0)
    e_neg = np.exp(z_neg - m_neg[None, :])
    denom_neg = np.exp(-m_neg) + e_neg.sum(axis=0)
    neg_value = float((m_neg + np.log(denom_neg)).sum()) / num_proxies
    g_neg = (cfg.alpha / num_proxies) * (e_neg / denom_neg[None, :])

    g = g_pos + g_neg
    d_emb, d_prox = _cosine_grads(g, u, q, s, x_norms, p_norms)
    return LossOutput(pos_value + neg_value, d_emb, d_prox)


def base_loss(embeddings, labels, proxies, cfg: LossConfig) -> LossOutput:
    """Dispatch to the configured base loss."""
    if cfg.kind == "nca":
        return proxy_nca_loss(embeddings, labels, proxies)
    return proxy_anchor_loss(embeddings, labels, proxies, cfg)


def hpl_loss(embeddings, per_level_labels, pyramid_proxies, weights, cfg: LossConfig) -> LossOutput:
    """Weighted sum of the base loss over every pyramid level.

    d_embeddings accumulates all levels; d_proxies covers only the level-0
    proxies, because coarse proxies are moved by clustering, never by
    gradients. Levels with zero weight are skipped entirely, so a zero
    weight degenerates bit-exactly to the remaining levels.
    """
    levels = len(pyramid_proxies)
    if levels < 1 or len(per_level_labels) != levels:
        raise ContractError(
            f"need equally many label vectors and proxy matrices, got "
            f"{len(per_level_labels)} and {levels}"
        )
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != levels:
        raise ContractError(f"weights must have one entry per level ({levels})")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ContractError("level weights must be finite and >= 0")

    value = None
    d_emb = None
    d_prox0 = None
    level_values = [None] * levels
    for l in range(levels):
        if w[l] == 0.0:
            continue
        out = base_loss(embeddings, per_level_labels[l], pyramid_proxies[l], cfg)
        level_values[l] = out.value
        if value is None:
            value = w[l] * out.value
            d_emb = w[l] * out.d_embeddings
        else:
            value += w[l] * out.value
            d_emb += w[l] * out.d_embeddings
        if l == 0:
            d_prox0 = w[0] * out.d_proxies
    if value is None:  # every weight was zero
        value = 0.0
        d_emb = np.zeros_like(np.asarray(embeddings, dtype=np.float64))
    if d_prox0 is None:
        d_prox0 = np.zeros(
            (np.asarray(pyramid_proxies[0]).shape[0], np.asarray(embeddings).shape[1])
        )
    return LossOutput(float(value), d_emb, d_prox0, level_values=level_values)
