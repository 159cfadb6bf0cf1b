"""Shared test helpers."""

from __future__ import annotations

import numpy as np

from fairdedup.embedstore import EmbeddingMatrix


def unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_matrix(rows, prefix="s") -> EmbeddingMatrix:
    rows = np.asarray(rows, dtype=np.float32)
    return EmbeddingMatrix.create([f"{prefix}{i}" for i in range(rows.shape[0])], rows)


def planted_cluster(rng, n_base, d, dup_pairs, jitter=1e-3):
    """Random unit rows plus near-duplicates of randomly chosen rows."""
    rows = unit_rows(rng, n_base, d)
    for _ in range(dup_pairs):
        src = int(rng.integers(n_base))
        noisy = rows[src] + jitter * rng.standard_normal(d)
        rows = np.vstack([rows, noisy / np.linalg.norm(noisy)])
    return rows


def pick_safe_epsilon(rows, candidates=(0.05, 0.1, 0.2, 0.3, 0.5), margin=1e-7):
    """Epsilon whose duplicate threshold stays clear of every pairwise similarity.

    Keeps oracle comparisons exact: no pair sits within float-rounding
    distance of the 1 - epsilon cut.
    """
    rows64 = np.asarray(rows, dtype=np.float64)
    q = rows64.shape[0]
    if q < 2:
        return candidates[0]
    gram = rows64 @ rows64.T
    sims = gram[np.triu_indices(q, k=1)]
    for eps in candidates:
        if np.abs(sims - (1.0 - eps)).min() > margin:
            return eps
    eps = candidates[0]
    while np.abs(sims - (1.0 - eps)).min() <= margin:
        eps += 1e-5
    return eps
