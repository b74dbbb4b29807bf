"""Cross-modal face-voice verification toolkit.

Trains a dual-branch fusion model over precomputed face and voice
embeddings, scores verification trials by Euclidean distance, evaluates
with equal error rate, and optionally polarizes scores using age/gender
matching confidence. Ships a synthetic correlated-embedding generator so
the full pipeline runs without any proprietary features.
"""

__version__ = "0.1.0"
