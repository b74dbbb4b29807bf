import math

import numpy as np
import pytest

from facevoice import diffcore as dc
from facevoice import losses as fl
from facevoice.diffcore import DiffArray
from facevoice.model import Linear


def _identity_head(dim):
    head = Linear(dim, dim, np.random.default_rng(0))
    head.W.data = np.eye(dim)
    head.b.data = np.zeros(dim)
    return head


def _config(dim=8, seed=0, **kwargs):
    cfg = fl.LossConfig(**kwargs)
    cfg.head = fl.make_head(dim, seed)
    return cfg


def _rng(seed=0):
    return np.random.default_rng(seed)


def _random_batch(rng, size, dim=8, n_identities=3):
    emb = rng.normal(size=(size, dim))
    ids = [f"id{rng.integers(n_identities)}" for _ in range(size)]
    return emb, ids


# ---------------------------------------------------------------------------
# similarity matrix
# ---------------------------------------------------------------------------


def test_similarity_identical_rows_is_one():
    cfg = _config()
    emb = np.tile(_rng(1).normal(size=8), (2, 1))
    S = fl.similarity_matrix(emb, cfg)
    assert S.data[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_similarity_disjoint_support_is_zero():
    # relu sigma plus an identity head lets projected rows occupy disjoint
    # coordinates, which a sigmoid head cannot (its outputs stay positive).
    cfg = _config(dim=4, sigma="relu")
    cfg.head = _identity_head(4)
    emb = np.array([[2.0, -1.0, 0.0, 0.0], [-3.0, 0.0, 1.0, 4.0]])
    S = fl.similarity_matrix(emb, cfg)
    assert S.data[0, 1] == 0.0


def test_similarity_matches_scalar_loop():
    cfg = _config(dim=128, seed=3)
    emb = _rng(2).normal(size=(4, 128))
    S = fl.similarity_matrix(emb, cfg).data

    W, b = cfg.head.W.data, cfg.head.b.data
    z = 1.0 / (1.0 + np.exp(-(emb @ W + b)))
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            zi = z[i] / max(np.linalg.norm(z[i]), 1e-12)
            zj = z[j] / max(np.linalg.norm(z[j]), 1e-12)
            expected[i, j] = float(np.dot(zi, zj))
    np.testing.assert_allclose(S, expected, atol=1e-12)


def test_similarity_bounds_and_symmetry():
    cfg = _config()
    emb = _rng(4).normal(size=(6, 8))
    S = fl.similarity_matrix(emb, cfg).data
    assert np.all(S >= 0.0) and np.all(S <= 1.0 + 1e-12)
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-12)


def test_similarity_needs_two_rows():
    cfg = _config()
    with pytest.raises(ValueError, match="batch"):
        fl.similarity_matrix(np.ones((1, 8)), cfg)


# ---------------------------------------------------------------------------
# pair masks
# ---------------------------------------------------------------------------


def test_pair_masks_same_pair():
    m = fl.pair_masks(["a", "a"])
    assert m.n_positive == 2 and m.n_negative == 0
    assert not m.positive.diagonal().any()


def test_pair_masks_different_pair():
    m = fl.pair_masks(["a", "b"])
    assert m.n_positive == 0 and m.n_negative == 2


def test_pair_masks_mixed():
    m = fl.pair_masks(["a", "a", "b"])
    assert {(0, 1), (1, 0)} == set(zip(*np.nonzero(m.positive)))
    assert m.n_negative == 4
    assert not (m.positive & m.negative).any()


def test_pair_masks_need_two():
    with pytest.raises(ValueError):
        fl.pair_masks(["a"])


# ---------------------------------------------------------------------------
# weighted pair losses and the orthogonality term
# ---------------------------------------------------------------------------


def _fixed_similarity(values):
    return DiffArray(np.asarray(values, dtype=np.float64))


def test_pair_loss_at_threshold_is_one():
    cfg = fl.LossConfig(theta=0.6)
    S = _fixed_similarity([[1.0, 0.6], [0.6, 1.0]])
    pos = fl.pair_masks(["a", "a"])
    lp, lm = fl.weighted_pair_losses(S, pos, cfg)
    assert lp.data == pytest.approx(2.0)  # both ordered pairs at exp(0)
    neg = fl.pair_masks(["a", "b"])
    lp, lm = fl.weighted_pair_losses(S, neg, cfg)
    assert lm.data == pytest.approx(2.0)


def test_pair_loss_monotonicity():
    cfg = fl.LossConfig()
    masks = fl.pair_masks(["a", "a", "b"])
    base = np.full((3, 3), 0.5)
    for bump in (0.1, 0.2):
        S_hi = base.copy()
        S_hi[0, 1] += bump
        lp_base, _ = fl.weighted_pair_losses(_fixed_similarity(base), masks, cfg)
        lp_hi, _ = fl.weighted_pair_losses(_fixed_similarity(S_hi), masks, cfg)
        assert lp_hi.data < lp_base.data
        S_hi[0, 1] = 0.5
        S_hi[0, 2] = 0.5 + bump
        _, lm_base = fl.weighted_pair_losses(_fixed_similarity(base), masks, cfg)
        _, lm_hi = fl.weighted_pair_losses(_fixed_similarity(S_hi), masks, cfg)
        assert lm_hi.data > lm_base.data


def test_orthogonal_term_direct_values():
    masks = fl.pair_masks(["a", "a", "b"])
    S = np.full((3, 3), 0.5)
    out = fl.orthogonal_term(_fixed_similarity(S), masks)
    assert out.data == pytest.approx(1.65)  # (2-0.5) + 0.3*0.5

    S = np.zeros((3, 3))
    S[0, 1] = S[1, 0] = 1.0
    out = fl.orthogonal_term(_fixed_similarity(S), masks)
    assert out.data == pytest.approx(1.0)  # (2-1) + 0.3*0


def test_orthogonal_term_fallbacks_warn():
    masks = fl.pair_masks(["a", "a"])
    with pytest.warns(UserWarning, match="no negative pairs"):
        out = fl.orthogonal_term(_fixed_similarity(np.ones((2, 2))), masks)
    assert out.data == pytest.approx(1.0)
    masks = fl.pair_masks(["a", "b"])
    with pytest.warns(UserWarning, match="no positive pairs"):
        out = fl.orthogonal_term(_fixed_similarity(np.zeros((2, 2))), masks)
    assert out.data == pytest.approx(1.0)


def test_orthogonal_term_bounds():
    rng = _rng(5)
    cfg = _config()
    for _ in range(20):
        emb, ids = _random_batch(rng, int(rng.integers(2, 10)))
        masks = fl.pair_masks(ids)
        S = fl.similarity_matrix(emb, cfg)
        with pytest.warns() if (masks.n_positive == 0 or masks.n_negative == 0) else _nullcontext():
            out = float(fl.orthogonal_term(S, masks).data)
        assert 1.0 - 1e-12 <= out <= 2.3 + 1e-12


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def test_combine_terms_hand_value():
    assert fl.combine_terms(1.0, 1.0, 1.0, 0.0, alpha=2.0, beta=50.0) == pytest.approx(
        1.3604365338911715, abs=1e-12
    )


def test_total_loss_two_identical_samples():
    # Identical embeddings, same identity: S01 = S10 = 1, both ordered
    # positive pairs count, no negatives (fallback mean 0).
    cfg = _config()
    emb = np.tile(_rng(6).normal(size=8), (2, 1))
    with pytest.warns(UserWarning, match="no negative"):
        loss, diag = fl.total_loss(emb, ["a", "a"], cfg)
    assert diag["l_plus"] == pytest.approx(2.0 * math.exp(-0.8), abs=1e-12)
    assert diag["l_minus"] == 0.0
    assert float(loss.data) == pytest.approx(1.3205736415131808, abs=1e-12)


def test_total_loss_floor():
    cfg = _config()
    rng = _rng(7)
    for _ in range(10):
        emb, ids = _random_batch(rng, 6)
        if len(set(ids)) == 1 or len(set(ids)) == len(ids):
            continue
        loss, diag = fl.total_loss(emb, ids, cfg)
        assert float(loss.data) >= diag["orthogonal"] >= 1.0 - 1e-12


def test_total_loss_permutation_invariant():
    cfg = _config()
    rng = _rng(8)
    emb, ids = _random_batch(rng, 7)
    if len(set(ids)) in (1, len(ids)):
        ids[0] = ids[1]
    base, _ = fl.total_loss(emb, ids, cfg)
    perm = rng.permutation(len(ids))
    swapped, _ = fl.total_loss(emb[perm], [ids[i] for i in perm], cfg)
    assert float(base.data) == pytest.approx(float(swapped.data), abs=1e-12)


def test_total_loss_gradients():
    cfg = _config(dim=6, seed=9)
    rng = _rng(10)
    emb = DiffArray(rng.normal(size=(5, 6)), requires_grad=True)
    ids = ["a", "a", "b", "b", "c"]

    def fn(emb, W, b):
        loss, _ = fl.total_loss(emb, ids, cfg)
        return loss

    assert dc.grad_check(fn, [emb, cfg.head.W, cfg.head.b]) < 1e-4


def test_total_loss_unweighted_is_orthogonal_only():
    cfg = _config(weighted=False)
    rng = _rng(11)
    emb, ids = _random_batch(rng, 6)
    ids = ["a", "a", "b", "b", "c", "c"]
    loss, diag = fl.total_loss(emb, ids, cfg)
    assert float(loss.data) == pytest.approx(diag["orthogonal"], abs=1e-15)
    assert diag["l_plus"] == 0.0 and diag["l_minus"] == 0.0


def test_loss_config_validation():
    with pytest.raises(ValueError, match="alpha"):
        fl.LossConfig(alpha=0.0).validate()
    with pytest.raises(ValueError, match="beta"):
        fl.LossConfig(beta=-1.0).validate()
    with pytest.raises(ValueError, match="theta"):
        fl.LossConfig(theta=1.5).validate()
    with pytest.raises(ValueError, match="sigma"):
        fl.LossConfig(sigma="softplus").validate()


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_oracle_matches_vectorized_on_random_batches():
    rng = _rng(12)
    cfg = _config(dim=8, seed=13)
    for case in range(100):
        size = int(rng.integers(2, 17))
        emb, ids = _random_batch(rng, size, n_identities=int(rng.integers(1, 5)))
        loss, _ = fl.total_loss(emb, ids, cfg)
        oracle = fl.loss_oracle(emb, ids, cfg)
        assert float(loss.data) == pytest.approx(oracle, abs=1e-9), f"case {case}"


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_oracle_matches_on_degenerate_batches():
    cfg = _config(dim=8, seed=14)
    rng = _rng(15)
    all_same = rng.normal(size=(5, 8))
    loss, _ = fl.total_loss(all_same, ["x"] * 5, cfg)
    assert float(loss.data) == pytest.approx(fl.loss_oracle(all_same, ["x"] * 5, cfg), abs=1e-9)
    all_diff = rng.normal(size=(5, 8))
    ids = [f"id{i}" for i in range(5)]
    loss, _ = fl.total_loss(all_diff, ids, cfg)
    assert float(loss.data) == pytest.approx(fl.loss_oracle(all_diff, ids, cfg), abs=1e-9)


def test_oracle_guards_batch_size():
    cfg = _config()
    with pytest.raises(ValueError, match="64"):
        fl.loss_oracle(np.ones((65, 8)), ["a"] * 65, cfg)
