import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp, softplus

from metabin.autograd import Tensor
from metabin.errors import BatchCompositionError, ContractError, NumericError
from metabin.gradsuite import run_case
from metabin.losses import (base_loss, batch_hard_triplet, combine, cross_entropy_smoothed,
                            inter_domain_shuffle, intra_domain_scatter, meta_train_loss)


def col(values):
    return Tensor(np.array(values, dtype=np.float64).reshape(-1, 1))


# -- oracles -------------------------------------------------------------------

def ce_oracle(logits, labels, eps):
    n, m = logits.shape
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    total = 0.0
    for i in range(n):
        for j in range(m):
            w = eps / m + (1.0 - eps if j == labels[i] else 0.0)
            total -= w * logp[i, j]
    return total / n


def triplet_oracle(emb, labels, margin):
    """Scan every positive and negative of every anchor; ties keep the lowest index."""
    n = len(labels)
    per_anchor = []
    for a in range(n):
        hardest_pos, hardest_neg = None, None
        for j in range(n):
            d = np.sqrt(np.sum((emb[a] - emb[j]) ** 2))
            if j != a and labels[j] == labels[a]:
                if hardest_pos is None or d > hardest_pos:
                    hardest_pos = d
            elif labels[j] != labels[a]:
                if hardest_neg is None or d < hardest_neg:
                    hardest_neg = d
        per_anchor.append(max(hardest_pos - hardest_neg + margin, 0.0))
    return np.mean(per_anchor)


def random_batch(rng, max_size=32, dim=None):
    ids = int(rng.integers(2, 7))
    per = rng.integers(2, 5, size=ids)
    while per.sum() > max_size:
        per = np.maximum(per - 1, 2)
    labels = np.repeat(rng.permutation(50)[:ids], per)
    labels = labels[rng.permutation(len(labels))]
    dim = int(rng.integers(1, 6)) if dim is None else dim
    emb = rng.normal(size=(len(labels), dim))
    if rng.random() < 0.3:
        emb = np.round(emb * 2) / 2  # coarse grid makes distance ties common
    return emb, labels


# -- cross-entropy -----------------------------------------------------------------

def test_ce_uniform_logits():
    for eps in (0.0, 0.1, 0.5):
        assert cross_entropy_smoothed(Tensor([[0.0, 0.0]]), [1], eps).item() == pytest.approx(
            np.log(2), abs=1e-15)


def test_ce_no_smoothing_example():
    loss = cross_entropy_smoothed(Tensor([[np.log(3.0), 0.0]]), [0], 0.0).item()
    assert round(loss, 6) == 0.287682


def test_ce_smoothing_example():
    # 0.95 * -ln(0.75) + 0.05 * -ln(0.25)
    loss = cross_entropy_smoothed(Tensor([[np.log(3.0), 0.0]]), [0], 0.1).item()
    assert loss == pytest.approx(0.95 * -np.log(0.75) + 0.05 * -np.log(0.25), abs=1e-15)
    assert round(loss, 6) == 0.342613


def test_ce_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, m = rng.integers(1, 8), rng.integers(2, 9)
        logits = rng.normal(size=(n, m)) * rng.uniform(0.1, 20)
        labels = rng.integers(0, m, size=n)
        eps = rng.uniform(0, 0.99)
        got = cross_entropy_smoothed(Tensor(logits), labels, eps).item()
        assert abs(got - ce_oracle(logits, labels, eps)) < 1e-12


def test_ce_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy_smoothed(Tensor(np.zeros((2, 3))), [0, 3], 0.1)


@pytest.mark.parametrize("eps", [-0.1, 1.0])
def test_ce_rejects_bad_epsilon(eps):
    with pytest.raises(ContractError):
        cross_entropy_smoothed(Tensor(np.zeros((1, 3))), [0], eps)


def test_ce_needs_two_classes():
    with pytest.raises(ContractError):
        cross_entropy_smoothed(Tensor(np.zeros((1, 1))), [0], 0.1)


# -- triplet ---------------------------------------------------------------------

def test_triplet_one_dimensional_example():
    loss = batch_hard_triplet(col([0, 5, 6, 7]), [0, 0, 1, 1], 0.3).item()
    assert loss == pytest.approx(1.15, abs=1e-15)


def test_triplet_inactive_when_far_apart():
    assert batch_hard_triplet(col([0, 1, 10, 11]), [0, 0, 1, 1], 0.3).item() == 0.0


def test_triplet_identical_embeddings_give_margin():
    assert batch_hard_triplet(Tensor(np.ones((4, 3))), [0, 0, 1, 1], 0.3).item() == pytest.approx(0.3)


def test_triplet_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        emb, labels = random_batch(rng)
        margin = rng.uniform(0, 2)
        assert batch_hard_triplet(Tensor(emb), labels, margin).item() == triplet_oracle(emb, labels, margin)


def test_triplet_names_anchor_without_positive():
    with pytest.raises(BatchCompositionError, match="anchor 2"):
        batch_hard_triplet(col([0, 1, 2]), [0, 0, 1], 0.3)


def test_triplet_without_negative():
    with pytest.raises(BatchCompositionError, match="negative"):
        batch_hard_triplet(col([0, 1]), [0, 0], 0.3)


def test_triplet_gradient_flows_through_selected_pairs_only():
    x = Tensor(np.array([[0.0], [5.0], [6.0], [7.0], [100.0], [101.0]]), requires_grad=True)
    batch_hard_triplet(x, [0, 0, 1, 1, 2, 2], 0.3).backward()
    # identity 2 sits far away and is never selected by an active triplet
    assert x.grad[4, 0] == 0.0 and x.grad[5, 0] == 0.0


# -- scatter --------------------------------------------------------------------

def test_scatter_identical_features():
    assert intra_domain_scatter(Tensor(np.ones((3, 2))), [0, 0, 0]).item() == pytest.approx(1.0)


def test_scatter_orthogonal_pair():
    loss = intra_domain_scatter(Tensor(np.eye(2)), [0, 0]).item()
    assert round(loss, 6) == 0.707107


def test_scatter_two_domains():
    emb = np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 0.0], [0.0, 1.0]])
    loss = intra_domain_scatter(Tensor(emb), [3, 3, 7, 7]).item()
    assert round(loss, 6) == 0.853553


def test_scatter_zero_norm():
    with pytest.raises(NumericError):
        intra_domain_scatter(Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]])), [0, 0])


# -- shuffle ------------------------------------------------------------------------

def test_shuffle_equidistant_gives_ln2():
    loss = inter_domain_shuffle(Tensor(np.zeros((4, 2))), [0, 1, 2, 3], [0, 0, 1, 1]).item()
    assert loss == pytest.approx(np.log(2), abs=1e-15)


def test_shuffle_tail_example():
    loss = inter_domain_shuffle(col([0, 10, 0, 10]), [0, 1, 2, 3], [0, 0, 1, 1]).item()
    assert loss == pytest.approx(softplus(-10.0), rel=1e-12)
    assert round(loss, 7) == pytest.approx(4.54e-5, abs=1e-7)


def test_shuffle_one_dimensional_anchor():
    # anchor 0 (domain 1): intra-domain negative at 1, inter-domain negative at 3
    emb, labels, domains = [0, 1, 3, 100], [0, 1, 2, 3], [1, 1, 2, 2]
    expected = [softplus(3 - 1), softplus(2 - 1), softplus(2 - 97), softplus(99 - 97)]
    assert expected[0] == pytest.approx(2.126928, abs=1e-6)
    loss = inter_domain_shuffle(col(emb), labels, domains).item()
    assert loss == pytest.approx(np.mean(expected), rel=1e-14)


def test_shuffle_rejects_single_domain():
    with pytest.raises(BatchCompositionError, match="inter-domain"):
        inter_domain_shuffle(col([0, 1, 2, 3]), [0, 0, 1, 1], [0, 0, 0, 0])


def test_shuffle_rejects_missing_intra_negative():
    with pytest.raises(BatchCompositionError, match="intra-domain"):
        inter_domain_shuffle(col([0, 1]), [0, 1], [0, 1])


# -- composites ----------------------------------------------------------------------

def test_composite_sums():
    assert combine(0.7, 0.3) == pytest.approx(1.0)
    assert combine(0.85, 0.69, 0.30) == pytest.approx(1.84)


def test_base_and_meta_losses_are_plain_sums():
    rng = np.random.default_rng(2)
    emb = Tensor(rng.normal(size=(8, 3)))
    logits = Tensor(rng.normal(size=(8, 4)))
    labels = np.repeat(np.arange(4), 2)
    domains = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    total, parts = base_loss(logits, emb, labels)
    assert total.item() == pytest.approx(parts["ce"] + parts["triplet"], abs=1e-14)
    total, parts = meta_train_loss(emb, labels, domains)
    assert total.item() == pytest.approx(parts["scatter"] + parts["shuffle"] + parts["triplet"], abs=1e-14)


def test_meta_loss_ablation_reports_nan():
    emb = Tensor(np.random.default_rng(3).normal(size=(8, 3)))
    labels = np.repeat(np.arange(4), 2)
    total, parts = meta_train_loss(emb, labels, [0, 0, 1, 1, 0, 0, 1, 1], use_scatter=False)
    assert np.isnan(parts["scatter"])
    assert total.item() == pytest.approx(parts["shuffle"] + parts["triplet"], abs=1e-14)
    with pytest.raises(ContractError):
        meta_train_loss(emb, labels, [0] * 8, use_scatter=False, use_shuffle=False, use_triplet=False)


@pytest.mark.parametrize("name", ["cross_entropy_smoothed", "batch_hard_triplet",
                                  "intra_domain_scatter", "inter_domain_shuffle", "base_loss",
                                  "meta_train_loss", "model_rho/scatter", "model_rho/shuffle",
                                  "model_rho/triplet", "model_rho/meta_train"])
def test_loss_gradients(name):
    assert run_case(name, instances=5, seed=31).passed


# -- invariances ---------------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(seeds, st.lists(st.integers(-20, 20), min_size=3, max_size=3))
def test_triplet_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    emb, labels = random_batch(rng, dim=3)
    # a dyadic grid keeps every coordinate difference exact under integer shifts
    emb = np.round(emb * 64) / 64
    a = batch_hard_triplet(Tensor(emb), labels, 0.3).item()
    b = batch_hard_triplet(Tensor(emb + np.array(shift, dtype=float)), labels, 0.3).item()
    assert a == b


@settings(max_examples=60, deadline=None)
@given(seeds, st.floats(1e-3, 1e3))
def test_scatter_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(9, 4)) + rng.normal(size=4)
    domains = rng.integers(0, 3, size=9)
    a = intra_domain_scatter(Tensor(emb), domains).item()
    b = intra_domain_scatter(Tensor(emb * scale), domains).item()
    assert abs(a - b) < 1e-12


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_losses_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(6), 2)
    domains = np.repeat(np.arange(6) % 2, 2)
    emb = rng.normal(size=(12, 3))
    logits = rng.normal(size=(12, 6))
    perm = rng.permutation(12)

    def losses(e, lo, la, do):
        return np.array([
            cross_entropy_smoothed(Tensor(lo), la, 0.1).item(),
            batch_hard_triplet(Tensor(e), la, 0.3).item(),
            intra_domain_scatter(Tensor(e), do).item(),
            inter_domain_shuffle(Tensor(e), la, do).item(),
        ])

    np.testing.assert_allclose(losses(emb, logits, labels, domains),
                               losses(emb[perm], logits[perm], labels[perm], domains[perm]),
                               rtol=0, atol=1e-12)
