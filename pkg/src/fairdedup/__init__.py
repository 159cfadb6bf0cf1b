"""Semantic deduplication for embedding datasets.

Clusters unit-norm embeddings, prunes duplicate neighborhoods with either
a max-distance or a fairness-aware selection heuristic, audits subgroup
disparity and ranking skew, and reproduces the minority-mass retention
study on synthetic data.
"""

__version__ = "0.1.0"
