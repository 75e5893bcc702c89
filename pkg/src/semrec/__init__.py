"""Lifelong user-interest modeling over semantic item ids.

Synthetic corpora with planted click structure, residual-quantized semantic
ids, two-stage behavior retrieval, similarity bucketization, a target-aware
attention ranker with hand-derived gradients, and information-theoretic
analyses of what the learned representations capture.
"""

__version__ = "0.1.0"
