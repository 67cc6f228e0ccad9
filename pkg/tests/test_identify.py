import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fud import tensor as T
from fud.data import DatasetConfig, generate_dataset, standard_features
from fud.identify import (
    cls_loss,
    cls_loss_value,
    eigengap_candidates,
    eigengap_select_k,
    filter_vectors,
    group_similarity_stats,
    kmeans,
    laplacian,
    similarity_csv,
    similarity_matrix,
    spectral_partition,
    spectrum,
    train_identifier,
)
from fud.models import ClassifierSpec, FilterPartition, Identifier
from fud.tensor import ContractError
from fud.training import train_classifier

SHAPE = (1, 16, 16)
SPEC = ClassifierSpec(input_shape=SHAPE)


def pearson(a, b):
    """Textbook sample correlation, written out term by term."""
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((a[i] - ma) * (b[i] - mb) for i in range(n))
    va = sum((a[i] - ma) ** 2 for i in range(n))
    vb = sum((b[i] - mb) ** 2 for i in range(n))
    return cov / (va * vb) ** 0.5


def gap_scan(values, top=5):
    """Brute-force eigengap choice: rank every k by its gap, take the top ones, return the max."""
    d = len(values)
    gaps = [(values[k] - values[k - 1], k) for k in range(1, d)]  # k is 1-based: gap after lambda_k
    ranked = sorted(gaps, key=lambda g: (-g[0], g[1]))[:top]
    return min(max(max(k for _, k in ranked), 2), d)


def block_similarity(sizes, within=2.0, between=0.0, noise=0.0, seed=0):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    S = np.where(labels[:, None] == labels[None, :], within, between).astype(float)
    if noise:
        E = np.random.default_rng(seed).uniform(0, noise, size=S.shape)
        S = S + (E + E.T) / 2
    np.fill_diagonal(S, 2.0)
    return S, labels


def random_similarity(d, seed):
    rng = np.random.default_rng(seed)
    return similarity_matrix(rng.normal(size=(d, 40)) + rng.normal(size=(1, 40)) * rng.uniform(0, 2, size=(d, 1)))


# ---------------------------------------------------------------------------
# similarity


def test_identical_filters_have_similarity_two():
    v = np.random.default_rng(0).normal(size=20)
    S = similarity_matrix(np.stack([v, v, v * 3 + 1]))
    np.testing.assert_allclose(S, 2.0, atol=1e-12)


def test_negated_filter_has_similarity_zero():
    v = np.random.default_rng(0).normal(size=20)
    S = similarity_matrix(np.stack([v, -v]))
    assert abs(S[0, 1]) < 1e-12


def test_similarity_matches_textbook_pearson():
    X = np.random.default_rng(1).normal(size=(4, 30))
    S = similarity_matrix(X)
    for i in range(4):
        for j in range(4):
            expected = 2.0 if i == j else pearson(list(X[i]), list(X[j])) + 1
            assert abs(S[i, j] - expected) <= 1e-12


def test_constant_filter_correlates_zero():
    X = np.random.default_rng(2).normal(size=(3, 10))
    X[1] = 0.7
    S = similarity_matrix(X)
    assert S[1, 0] == 1.0 and S[1, 2] == 1.0 and S[1, 1] == 2.0


def test_filter_vectors_layout():
    model = Identifier(SPEC, seed=0)
    x = np.random.default_rng(0).uniform(size=(3,) + SHAPE)
    V = filter_vectors(model, 1, x)
    _, act = model.forward(x, hook=1)
    hw = act.shape[2] * act.shape[3]
    assert V.shape == (16, 3 * hw)
    np.testing.assert_array_equal(V[5, :hw], act.data[0, 5].ravel())
    np.testing.assert_array_equal(V[5, hw : 2 * hw], act.data[1, 5].ravel())
    with pytest.raises(ContractError):
        filter_vectors(model, 1, x[:1])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 7), st.integers(2, 12)), elements=st.floats(-5, 5)))
def test_similarity_invariants(X):
    S = similarity_matrix(X)
    np.testing.assert_array_equal(S, S.T)
    np.testing.assert_array_equal(np.diag(S), 2.0)
    assert S.min() >= 0 and S.max() <= 2


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10_000))
def test_laplacian_spectrum_nonnegative_and_ascending(d, seed):
    values, vectors = spectrum(random_similarity(d, seed))
    assert values[0] >= -1e-8
    assert np.all(np.diff(values) >= 0)
    np.testing.assert_allclose(laplacian(random_similarity(d, seed)).sum(axis=1), 0, atol=1e-12)


# ---------------------------------------------------------------------------
# eigengap


def test_eigengap_candidates_on_given_spectrum():
    cands = eigengap_candidates(np.array([0, 0.01, 0.02, 0.9, 1.1]))
    assert cands[0] == 3


def test_three_blocks_have_three_zero_eigenvalues():
    S, _ = block_similarity([3, 4, 5])
    values, _ = spectrum(S)
    assert np.sum(np.abs(values) < 1e-8) == 3
    assert 3 in eigengap_candidates(values)


@pytest.mark.parametrize("seed", range(50))
def test_eigengap_matches_gap_scan_oracle(seed):
    d = 3 + seed % 14
    S = random_similarity(d, seed)
    assert eigengap_select_k(S) == gap_scan(list(spectrum(S)[0]))
    assert 2 <= eigengap_select_k(S) <= d


def test_eigengap_on_trained_layer_matches_oracle():
    ds = generate_dataset(DatasetConfig(n=200, features=standard_features(glyph_size=4), task="task", image_size=SHAPE))
    model = Identifier(SPEC, seed=0)
    train_classifier(model, ds.x, ds.y, 2, 0.05, 32, 0)
    S = similarity_matrix(filter_vectors(model, 1, ds.x[:64]))
    assert eigengap_select_k(S) == gap_scan(list(spectrum(S)[0]))


def test_eigengap_needs_three_filters():
    with pytest.raises(ContractError):
        eigengap_select_k(np.full((2, 2), 2.0))


# ---------------------------------------------------------------------------
# partitioning


def test_block_partition_matches_exhaustive_search():
    S, labels = block_similarity([2, 2, 2], within=1.8, between=0.4, noise=0.2, seed=3)
    part = spectral_partition(S, 3, seed=0)

    def within_score(assign):
        # sum over groups of within-group similarity as a share of the group's total
        a = np.asarray(assign)
        return sum(S[np.ix_(a == g, a == g)].sum() / S[a == g].sum() for g in set(assign))

    best = max(
        (assign for assign in itertools.product(range(3), repeat=6) if len(set(assign)) == 3),
        key=within_score,
    )
    canon = lambda a: FilterPartition([{v: i + 1 for i, v in enumerate(dict.fromkeys(a))}[v] for v in a]).assignment
    assert part.assignment == canon(best) == canon(list(labels))


def test_k_equal_d_is_singletons():
    S = random_similarity(6, 0)
    assert spectral_partition(S, 6).assignment == [1, 2, 3, 4, 5, 6]


def test_partition_is_seed_deterministic():
    S = random_similarity(12, 4)
    assert spectral_partition(S, 4, seed=9).assignment == spectral_partition(S, 4, seed=9).assignment


def test_partition_bounds():
    S = random_similarity(5, 0)
    for k in (1, 6):
        with pytest.raises(ContractError):
            spectral_partition(S, k)


def test_kmeans_never_leaves_empty_clusters():
    pts = np.zeros((6, 2))
    pts[0] = 1.0  # five coincident points force the repair path
    labels = kmeans(pts, 4, seed=0)
    assert set(labels) == {0, 1, 2, 3}


# ---------------------------------------------------------------------------
# grouping loss


def test_cls_loss_single_group_is_minus_one():
    act = np.random.default_rng(0).uniform(size=(3, 5, 4, 4))
    assert cls_loss(act, FilterPartition([1] * 5)).item() == -1.0


def test_cls_loss_perfect_blocks_approach_minus_k():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(2, 3, 4, 4))
    # three blocks whose members coincide; cross-block correlation is near zero but not exactly
    act = np.concatenate([base[:, [0]]] * 2 + [base[:, [1]]] * 2 + [base[:, [2]]] * 2, axis=1)
    value = cls_loss(act, FilterPartition([1, 1, 2, 2, 3, 3])).item()
    assert -3 <= value < -1.5
    # perfectly anti-correlated blocks make every cross similarity 0, so each ratio is exactly 1
    anti = np.concatenate([base[:, [0]], base[:, [0]], -base[:, [0]], -base[:, [0]]], axis=1)
    assert abs(cls_loss(anti, FilterPartition([1, 1, 2, 2])).item() + 2.0) < 1e-12


def test_cls_loss_hand_case_and_gradient():
    rng = np.random.default_rng(2)
    act = rng.uniform(0.1, 1.0, size=(2, 4, 3, 3))
    part = FilterPartition([1, 2, 1, 2])
    S = similarity_matrix(act.transpose(1, 0, 2, 3).reshape(4, -1))
    # scalar recomputation of -(sum within / sum all) per group
    expected = 0.0
    for members in ([0, 2], [1, 3]):
        within = sum(S[i, j] for i in members for j in members)
        total = sum(S[i, j] for i in members for j in range(4))
        expected -= within / total
    assert abs(cls_loss(act, part).item() - expected) < 1e-10
    assert abs(cls_loss_value(S, part) - expected) < 1e-10
    assert T.grad_check(lambda t: cls_loss(t, part), act) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_cls_loss_range(seed, k):
    rng = np.random.default_rng(seed)
    act = rng.uniform(size=(2, 6, 3, 3))
    assign = list(range(1, k + 1)) + list(rng.integers(1, k + 1, size=6 - k))
    value = cls_loss(act, FilterPartition(assign)).item()
    assert -k - 1e-12 <= value <= 0


def test_group_similarity_stats():
    S, labels = block_similarity([2, 3], within=1.5, between=0.5)
    within, between = group_similarity_stats(S, FilterPartition(list(labels + 1)))
    assert within == 1.5 and between == 0.5


def test_similarity_csv_round_trip():
    S = random_similarity(4, 0)
    back = np.loadtxt(similarity_csv(S).splitlines(), delimiter=",")
    np.testing.assert_array_equal(back, S)


# ---------------------------------------------------------------------------
# training


@pytest.fixture(scope="module")
def glyph_split():
    cfg = dict(features=standard_features(glyph_size=4), task="task", image_size=SHAPE)
    return generate_dataset(DatasetConfig(n=300, seed=0, **cfg)), generate_dataset(DatasetConfig(n=64, seed=50, **cfg))


def test_zero_gamma_equals_plain_training(glyph_split):
    train, probe = glyph_split
    a = Identifier(SPEC, seed=3)
    b = Identifier(SPEC, seed=3)
    train_identifier(a, train.x, train.y, probe.x, gamma=0.0, t1=1, t2=2, batch_size=32, seed=5)
    train_classifier(b, train.x, train.y, 3, 0.05, 32, 5)
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters(), b.parameters()))


def test_grouping_separates_similarities(glyph_split):
    train, probe = glyph_split
    model = Identifier(SPEC, seed=0)
    res = train_identifier(model, train.x, train.y, train.x[:64], gamma=1.0, t1=2, t2=3, batch_size=32, seed=0)
    assert model.partition is res.partition and 2 <= res.k <= 16
    within, between = group_similarity_stats(similarity_matrix(filter_vectors(model, 1, probe.x)), res.partition)
    assert within > between


def test_fixed_k_override(glyph_split):
    train, probe = glyph_split
    model = Identifier(SPEC, seed=0)
    res = train_identifier(model, train.x, train.y, probe.x, t1=1, t2=0, batch_size=32, k=16)
    assert res.partition.assignment == list(range(1, 17))
    with pytest.raises(ContractError):
        train_identifier(model, train.x, train.y, probe.x, t1=-1)
