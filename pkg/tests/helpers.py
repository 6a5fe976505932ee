"""Shared oracles for the test suite."""

import numpy as np

FD_STEP = 1e-4


def central_difference(fn, x, h=FD_STEP):
    """Numerical gradient of scalar ``fn`` at array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (fn(up) - fn(down)) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def brute_force_isotonic(y, w=None):
    """Exact weighted isotonic fit by enumerating every partition into blocks.

    The optimal monotone fit is constant on contiguous blocks with block
    means as values; among all partitions whose block means are
    non-decreasing, the one with least weighted squared error wins.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    n = y.size
    best, best_err = None, np.inf
    for cuts in range(1 << max(n - 1, 0)):
        bounds = [0] + [i + 1 for i in range(n - 1) if cuts >> i & 1] + [n]
        fit = np.empty(n)
        means = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            m = float(np.dot(w[a:b], y[a:b]) / w[a:b].sum())
            means.append(m)
            fit[a:b] = m
        if any(m1 > m2 + 1e-12 for m1, m2 in zip(means, means[1:])):
            continue
        err = float(np.dot(w, (y - fit) ** 2))
        if err < best_err - 1e-12:
            best, best_err = fit, err
    return best


def random_corpus_docs(seed: int, n: int, dim: int = 16, duplicate_fraction: float = 0.1):
    """Unit-norm random documents with shuffled ids and some exact duplicates (score ties)."""
    from semrank.retrieval import DocumentRecord

    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(n, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    feats = rng.uniform(0, 1, size=(n, 2)).round(2)
    n_dup = int(n * duplicate_fraction)
    src = rng.integers(0, n, n_dup)
    dst = rng.integers(0, n, n_dup)
    emb[dst] = emb[src]
    feats[dst] = feats[src]
    ids = [f"doc-{i:06d}" for i in rng.permutation(n)]
    colors, sizes = ("red", "green", "blue"), ("s", "m", "l", "xl")
    c = rng.integers(0, len(colors), n)
    s = rng.integers(0, len(sizes), n)
    return [DocumentRecord(ids[i], emb[i], {"color": colors[c[i]], "size": sizes[s[i]]},
                           {"f1": float(feats[i, 0]), "f2": float(feats[i, 1])}) for i in range(n)]


def random_filters(rng):
    """A random conjunction over the attributes of :func:`random_corpus_docs`."""
    filters = {}
    if rng.random() < 0.7:
        filters["color"] = list(rng.choice(["red", "green", "blue"], size=int(rng.integers(1, 3)), replace=False))
    if rng.random() < 0.5:
        filters["size"] = str(rng.choice(["s", "m", "l", "xl"]))
    return filters


def full_sort_topk(corpus, query, weights):
    """Oracle: score every filtered document, sort everything, cut at K."""
    allowed = []
    for i, doc in enumerate(corpus.docs):
        ok = True
        for attr, pred in query.filters.items():
            vals = pred if isinstance(pred, (list, tuple, set)) else [pred]
            ok &= doc.attributes.get(attr) in vals
        if ok:
            allowed.append(i)
    scores = corpus.scores(query.embedding, weights)
    rows = sorted(((corpus.ids[i], float(scores[i])) for i in allowed), key=lambda r: (-r[1], r[0]))
    return rows[:query.k]


def planted_rows(seed, n_per_rank=4000, decay=0.9):
    """Rows whose outcome rate is ``score * decay**(rank-1)``."""
    from semrank.calibration import MAX_RANK

    rng = np.random.default_rng(seed)
    rows = []
    for r in range(1, MAX_RANK + 1):
        s = rng.uniform(0, 1, n_per_rank)
        y = (rng.random(n_per_rank) < s * decay ** (r - 1)).astype(float)
        rows += list(zip(s, y, [r] * n_per_rank))
    return rows
