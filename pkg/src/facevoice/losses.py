"""Dynamic sample-pair weighted loss with an orthogonality penalty.

A projection head maps fused embeddings through a squashing nonlinearity
and L2 row normalization; the resulting similarity matrix drives three
terms: an exponentially weighted positive-pair pull, an exponentially
weighted negative-pair push, and an orthogonality term that rewards high
mean positive similarity and low mean negative similarity.

`loss_oracle` recomputes the same quantity with explicit scalar loops and
no vectorization; it exists purely to cross-check `total_loss` in tests.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray
from .model import Linear

SIGMA_KINDS = ("sigmoid", "relu", "identity")

# Fallback mean similarities for batches missing one pair class, keeping
# the orthogonality term finite: perfect positives, orthogonal negatives.
FALLBACK_POS_MEAN = 1.0
FALLBACK_NEG_MEAN = 0.0


@dataclass
class LossConfig:
    """Scaling factors, similarity threshold, and the projection head.

    alpha scales positive-pair weights, beta negative-pair weights, theta
    is the similarity threshold both are centered on. `weighted=False`
    drops the pair-weighted terms and keeps only the orthogonality term.
    """

    alpha: float = 2.0
    beta: float = 50.0
    theta: float = 0.6
    sigma: str = "sigmoid"
    exponent_cap: float = 60.0
    weighted: bool = True
    head: Linear | None = None

    def validate(self) -> "LossConfig":
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta!r}")
        if self.sigma not in SIGMA_KINDS:
            raise ValueError(f"sigma must be one of {SIGMA_KINDS}, got {self.sigma!r}")
        return self


@dataclass
class PairMasks:
    """Disjoint positive/negative masks over ordered index pairs, diagonal excluded."""

    positive: np.ndarray
    negative: np.ndarray

    @property
    def n_positive(self) -> int:
        return int(self.positive.sum())

    @property
    def n_negative(self) -> int:
        return int(self.negative.sum())


def pair_masks(identities) -> PairMasks:
    ids = list(identities)
    if len(ids) < 2:
        raise ValueError(f"pair masks need a batch of at least 2, got {len(ids)}")
    arr = np.array(ids, dtype=object)
    same = arr[:, None] == arr[None, :]
    off_diag = ~np.eye(len(ids), dtype=bool)
    return PairMasks(positive=same & off_diag, negative=~same & off_diag)


def _apply_sigma(x: DiffArray, sigma: str) -> DiffArray:
    if sigma == "sigmoid":
        return dc.sigmoid(x)
    if sigma == "relu":
        return dc.relu(x)
    return x


def similarity_matrix(embeddings, config: LossConfig) -> DiffArray:
    """Pairwise similarities of the projected, row-normalized embeddings."""
    emb = embeddings if isinstance(embeddings, DiffArray) else DiffArray(embeddings)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError(f"similarity matrix needs a [batch >= 2, dim] input, got shape {emb.shape}")
    if config.head is None:
        raise ValueError("LossConfig.head is not set")
    z = dc.l2_normalize(_apply_sigma(config.head(emb), config.sigma))
    return dc.matmul(z, dc.transpose(z))


def weighted_pair_losses(S: DiffArray, masks: PairMasks, config: LossConfig) -> tuple[DiffArray, DiffArray]:
    """Summed exponential weights over positive and negative pairs.

    Exponents are clamped at config.exponent_cap before exponentiation;
    the clamped region contributes zero gradient.
    """
    if masks.n_positive == 0 and masks.n_negative == 0:
        raise ValueError("loss undefined: batch has neither positive nor negative pairs")
    centered = dc.sub(S, config.theta)
    pos_exp = dc.exp(dc.clip_max(dc.mul(centered, -config.alpha), config.exponent_cap))
    neg_exp = dc.exp(dc.clip_max(dc.mul(centered, config.beta), config.exponent_cap))
    l_plus = dc.sum(dc.mul(DiffArray(masks.positive.astype(np.float64)), pos_exp))
    l_minus = dc.sum(dc.mul(DiffArray(masks.negative.astype(np.float64)), neg_exp))
    return l_plus, l_minus


def orthogonal_term(S: DiffArray, masks: PairMasks) -> DiffArray:
    """(2 - mean positive similarity) + 0.3 * |mean negative similarity|."""
    if masks.n_positive:
        mask = DiffArray(masks.positive.astype(np.float64))
        s_pos = dc.div(dc.sum(dc.mul(mask, S)), float(masks.n_positive))
    else:
        warnings.warn("batch has no positive pairs; orthogonality term uses the perfect-positive fallback")
        s_pos = DiffArray(FALLBACK_POS_MEAN)
    if masks.n_negative:
        mask = DiffArray(masks.negative.astype(np.float64))
        s_neg = dc.div(dc.sum(dc.mul(mask, S)), float(masks.n_negative))
    else:
        warnings.warn("batch has no negative pairs; orthogonality term uses the orthogonal-negative fallback")
        s_neg = DiffArray(FALLBACK_NEG_MEAN)
    return dc.add(dc.sub(2.0, s_pos), dc.mul(0.3, dc.absolute(s_neg)))


def combine_terms(l_plus: float, l_minus: float, s_pos: float, s_neg: float,
                  alpha: float, beta: float) -> float:
    """Scalar form of the total loss, for hand-checkable expectations."""
    orth = (2.0 - s_pos) + 0.3 * abs(s_neg)
    return math.log1p(l_plus) / alpha + math.log1p(l_minus) / beta + orth


def total_loss(embeddings, identities, config: LossConfig) -> tuple[DiffArray, dict]:
    """Differentiable total loss plus float diagnostics for logging."""
    config.validate()
    masks = pair_masks(identities)
    emb = embeddings if isinstance(embeddings, DiffArray) else DiffArray(embeddings)
    if emb.shape[0] != masks.positive.shape[0]:
        raise ValueError(f"{emb.shape[0]} embeddings vs {masks.positive.shape[0]} identities")
    S = similarity_matrix(emb, config)
    orth = orthogonal_term(S, masks)
    if config.weighted:
        l_plus, l_minus = weighted_pair_losses(S, masks, config)
        loss = dc.add(
            dc.add(dc.mul(1.0 / config.alpha, dc.log(dc.add(1.0, l_plus))),
                   dc.mul(1.0 / config.beta, dc.log(dc.add(1.0, l_minus)))),
            orth,
        )
        lp, lm = float(l_plus.data), float(l_minus.data)
    else:
        loss = orth
        lp = lm = 0.0
    s_data = S.data
    diagnostics = {
        "l_plus": lp,
        "l_minus": lm,
        "orthogonal": float(orth.data),
        "s_pos_mean": float(s_data[masks.positive].mean()) if masks.n_positive else FALLBACK_POS_MEAN,
        "s_neg_mean": float(s_data[masks.negative].mean()) if masks.n_negative else FALLBACK_NEG_MEAN,
        "n_positive": masks.n_positive,
        "n_negative": masks.n_negative,
    }
    return loss, diagnostics


def loss_oracle(embeddings: np.ndarray, identities, config: LossConfig) -> float:
    """Scalar double-loop recomputation of total_loss; test use only."""
    config.validate()
    emb = np.asarray(embeddings, dtype=np.float64)
    n, d = emb.shape
    if n > 64:
        raise ValueError("loss_oracle is a desk-scale check; batch must be <= 64")
    if n < 2:
        raise ValueError("loss_oracle needs a batch of at least 2")
    ids = list(identities)
    W = config.head.W.data
    b = config.head.b.data
    out_dim = W.shape[1]

    z = [[0.0] * out_dim for _ in range(n)]
    for i in range(n):
        for j in range(out_dim):
            acc = b[j]
            for k in range(d):
                acc += emb[i, k] * W[k, j]
            if config.sigma == "sigmoid":
                if acc >= 0.0:
                    acc = 1.0 / (1.0 + math.exp(-acc))
                else:
                    e = math.exp(acc)
                    acc = e / (1.0 + e)
            elif config.sigma == "relu":
                acc = acc if acc > 0.0 else 0.0
            z[i][j] = acc

    for i in range(n):
        norm = math.sqrt(math.fsum(v * v for v in z[i]))
        denom = norm if norm > dc.NORM_GUARD else dc.NORM_GUARD
        z[i] = [v / denom for v in z[i]]

    pos_terms, neg_terms = [], []
    pos_sims, neg_sims = [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            s = math.fsum(z[i][k] * z[j][k] for k in range(out_dim))
            if ids[i] == ids[j]:
                pos_sims.append(s)
                pos_terms.append(math.exp(min(-config.alpha * (s - config.theta), config.exponent_cap)))
            else:
                neg_sims.append(s)
                neg_terms.append(math.exp(min(config.beta * (s - config.theta), config.exponent_cap)))

    s_pos = math.fsum(pos_sims) / len(pos_sims) if pos_sims else FALLBACK_POS_MEAN
    s_neg = math.fsum(neg_sims) / len(neg_sims) if neg_sims else FALLBACK_NEG_MEAN
    orth = (2.0 - s_pos) + 0.3 * abs(s_neg)
    if not config.weighted:
        return orth
    l_plus = math.fsum(pos_terms)
    l_minus = math.fsum(neg_terms)
    return math.log(1.0 + l_plus) / config.alpha + math.log(1.0 + l_minus) / config.beta + orth


def make_head(embed_dim: int, seed: int, tag: int = 0) -> Linear:
    """Seeded similarity projection head (embed_dim -> embed_dim)."""
    return Linear(embed_dim, embed_dim, np.random.default_rng([int(seed), 0x51C, int(tag)]))
