"""Independent reference implementations used to check the metric code."""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np

from streamcap.codec import tokenize


def brute_cider(preds: dict, refs: dict, n: int = 4, sigma: float = 6.0) -> float:
    """Dense-vector TF-IDF CIDEr-D over an explicit n-gram index."""
    keys = sorted(refs)

    def grams(text, k):
        w = tokenize(text)
        return Counter(tuple(w[i : i + k]) for i in range(len(w) - k + 1))

    total = []
    for k in keys:
        per_ref = []
        for r in refs[k]:
            per_n = []
            for size in range(1, n + 1):
                index = sorted(set(grams(preds.get(k, ""), size)) | set(grams(r, size)))
                df = np.array([sum(any(g in grams(x, size) for x in refs[v]) for v in keys) for g in index], dtype=float)
                idf = math.log(len(keys)) - np.log(np.maximum(df, 1.0))
                h = np.array([grams(preds.get(k, ""), size)[g] for g in index], dtype=float) * idf
                rv = np.array([grams(r, size)[g] for g in index], dtype=float) * idf
                nh, nr = np.linalg.norm(h), np.linalg.norm(rv)
                dot = float(np.minimum(h, rv) @ rv)
                per_n.append(dot / (nh * nr) if nh > 0 and nr > 0 else dot)
            delta = len(tokenize(preds.get(k, ""))) - len(tokenize(r))
            per_ref.append(np.mean(per_n) * math.exp(-(delta**2) / (2 * sigma**2)))
        total.append(10.0 * np.mean(per_ref))
    return float(np.mean(total))


def exhaustive_order_preserving(sim: np.ndarray) -> float:
    """Best sum over all order-preserving one-to-one matchings, by enumeration."""
    P, G = sim.shape
    best = 0.0
    for k in range(1, min(P, G) + 1):
        for ps in itertools.combinations(range(P), k):
            for gs in itertools.combinations(range(G), k):
                best = max(best, float(sum(sim[p, g] for p, g in zip(ps, gs))))
    return best
