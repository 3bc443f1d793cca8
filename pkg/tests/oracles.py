"""Independent reference implementations used to check the library.

Everything here is written with scalar Python loops and the math module,
deliberately avoiding the library's own code paths, so agreement between
the two is meaningful.
"""

import math

import numpy as np


def finite_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, guard=1e-8):
    """Largest relative error over coordinates where |analytic| > guard.

    Differences at or below the guard count as agreement: central
    differences at h=1e-5 carry roundoff noise of roughly eps*|f|/h, which
    is large relative to coordinates barely above the guard, so the guard
    doubles as the absolute tolerance (the usual atol/rtol pairing).
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    worst = 0.0
    for ai, ni in zip(a, n):
        if abs(ai) > guard and abs(ai - ni) > guard:
            rel = abs(ai - ni) / max(abs(ai), abs(ni))
            worst = max(worst, rel)
    return worst


def _dot(u, v):
    total = 0.0
    for a, b in zip(u, v):
        total += float(a) * float(b)
    return total


def _norm(u):
    return math.sqrt(_dot(u, u))


def _cos(u, v):
    return _dot(u, v) / (_norm(u) * _norm(v))


def scalar_nca(embeddings, labels, proxies):
    """Proxy-NCA value by direct per-sample evaluation."""
    emb = np.asarray(embeddings, dtype=np.float64)
    prox = np.asarray(proxies, dtype=np.float64)
    total = 0.0
    for i in range(emb.shape[0]):
        y = int(labels[i])
        sims = [_cos(emb[i], prox[c]) for c in range(prox.shape[0])]
        denom = 0.0
        for c in range(prox.shape[0]):
            if c != y:
                denom += math.exp(sims[c])
        total += -math.log(math.exp(sims[y]) / denom)
    return total


def scalar_anchor(embeddings, labels, proxies, alpha=32.0, delta=0.1):
    """Proxy Anchor value by direct per-proxy evaluation."""
    emb = np.asarray(embeddings, dtype=np.float64)
    prox = np.asarray(proxies, dtype=np.float64)
    labels = [int(v) for v in labels]
    num_proxies = prox.shape[0]
    with_pos = [c for c in range(num_proxies) if c in labels]
    pos_total = 0.0
    for c in with_pos:
        acc = 0.0
        for i in range(emb.shape[0]):
            if labels[i] == c:
                acc += math.exp(-alpha * (_cos(emb[i], prox[c]) - delta))
        pos_total += math.log1p(acc)
    neg_total = 0.0
    for c in range(num_proxies):
        acc = 0.0
        for i in range(emb.shape[0]):
            if labels[i] != c:
                acc += math.exp(alpha * (_cos(emb[i], prox[c]) + delta))
        neg_total += math.log1p(acc)
    value = neg_total / num_proxies
    if with_pos:
        value += pos_total / len(with_pos)
    return value


def scalar_mlp_forward(weights, biases, x):
    """One input row through affine+ReLU layers, scalar arithmetic."""
    act = [float(v) for v in x]
    num_layers = len(weights)
    for layer in range(num_layers):
        w = weights[layer]
        b = biases[layer]
        out = []
        for j in range(w.shape[0]):
            z = 0.0
            for k in range(w.shape[1]):
                z += float(act[k]) * float(w[j, k])
            z += float(b[j])
            if layer < num_layers - 1:
                z = z if z > 0.0 else 0.0
            out.append(z)
        act = out
    return np.array(act, dtype=np.float64)


def brute_retrieval(query_embeddings, query_labels, gallery_embeddings,
                    gallery_labels, ks, same_set=False):
    """Retrieval metrics by per-query scalar scan and explicit sort.

    Returns (recall_at dict, r_precision, map_at_r) aggregated with the same
    sequential left-to-right summation the library uses, so values should
    match bit for bit when rankings agree.
    """
    q_emb = np.asarray(query_embeddings, dtype=np.float64)
    g_emb = np.asarray(gallery_embeddings, dtype=np.float64)
    q_lab = [int(v) for v in query_labels]
    g_lab = [int(v) for v in gallery_labels]
    num_q = q_emb.shape[0]
    num_g = g_emb.shape[0]

    hits_at_k = {int(k): [] for k in ks}
    r_precisions = []
    average_precisions = []
    for i in range(num_q):
        sims = [_cos(q_emb[i], g_emb[j]) for j in range(num_g)]
        order = sorted(range(num_g), key=lambda j: (-sims[j], j))
        if same_set:
            order = [j for j in order if j != i]
        rel = [g_lab[j] == q_lab[i] for j in order]
        r = sum(1 for v in rel if v)
        if r == 0:
            raise AssertionError("query with no relevant gallery item")
        for k in hits_at_k:
            hits_at_k[k].append(1.0 if any(rel[:k]) else 0.0)
        top_r = rel[:r]
        found = 0
        ap = 0.0
        for rank, is_rel in enumerate(top_r, start=1):
            if is_rel:
                found += 1
                ap += found / rank
        r_precisions.append(found / r)
        average_precisions.append(ap / r)

    def seq_mean(values):
        acc = 0.0
        for v in values:
            acc += v
        return acc / len(values)

    recall = {k: seq_mean(v) for k, v in hits_at_k.items()}
    return recall, seq_mean(r_precisions), seq_mean(average_precisions)


def nearest_centroid(points, centroids):
    """Index of the closest centroid per point, ties to the lower index."""
    pts = np.asarray(points, dtype=np.float64)
    cents = np.asarray(centroids, dtype=np.float64)
    out = []
    for i in range(pts.shape[0]):
        best = 0
        best_d = None
        for j in range(cents.shape[0]):
            d = 0.0
            for a, b in zip(pts[i], cents[j]):
                diff = float(a) - float(b)
                d += diff * diff
            if best_d is None or d < best_d:
                best_d = d
                best = j
        out.append(best)
    return out


def group_sse(points, centroids, assignment):
    """Sum of squared point-to-assigned-centroid distances."""
    pts = np.asarray(points, dtype=np.float64)
    cents = np.asarray(centroids, dtype=np.float64)
    total = 0.0
    for i in range(pts.shape[0]):
        c = cents[int(assignment[i])]
        for a, b in zip(pts[i], c):
            diff = float(a) - float(b)
            total += diff * diff
    return total
