import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from data import (
    Dataset,
    Source,
    gen_dataset,
    gen_flipped_split,
    gen_orthogonal_dataset,
    modified_gram_schmidt,
    ortho_stats,
)
from theory import verify_uniform_vector_lemma
from utils import DatasetError, DimensionError


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([s for s in Source if s is not Source.FILE]),
    st.integers(min_value=1, max_value=32),
    st.integers(min_value=1, max_value=16),
    st.integers(min_value=0, max_value=2 ** 32),
)
def test_generators_respect_shape_and_labels(source, d, n, seed):
    assume(source is not Source.ORTHOGONALIZED or n <= d)
    ds = gen_dataset(source, d, n, seed)
    assert ds.X.shape == (n, d)
    assert set(np.unique(ds.y)) <= {-1.0, 1.0}
    assert ds.source is source
    if source is Source.UNIFORM:
        assert np.all(np.abs(ds.X) <= 1.0)
    if source is Source.RADEMACHER:
        assert np.all(np.abs(ds.X) == 1.0)


def test_same_seed_same_bytes():
    a = gen_dataset("gaussian", 16, 8, seed=11)
    b = gen_dataset("gaussian", 16, 8, seed=11)
    c = gen_dataset("gaussian", 16, 8, seed=12)
    assert a.same_as(b)
    assert not a.same_as(c)


def test_uniform_scale():
    ds = gen_dataset("uniform", 64, 4, seed=0, scale=0.25)
    assert np.all(np.abs(ds.X) <= 0.25)
    assert ds.scale == 0.25


def test_orthogonal_dataset_is_orthogonal():
    ds = gen_orthogonal_dataset(128, 32, seed=1)
    norms = np.linalg.norm(ds.X, axis=1)
    np.testing.assert_allclose(norms, np.sqrt(128), rtol=1e-12)
    G = np.abs(ds.X @ ds.X.T)
    np.fill_diagonal(G, 0.0)
    assert G.max() <= 1e-9 * norms.max() ** 2


def test_orthogonal_dataset_needs_room():
    with pytest.raises(DatasetError):
        gen_orthogonal_dataset(4, 5, seed=0)


def test_gram_schmidt_rejects_dependent_rows():
    A = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    with pytest.raises(DatasetError):
        modified_gram_schmidt(A)


def test_file_source_is_not_generated():
    with pytest.raises(DatasetError):
        gen_dataset("file", 4, 4, seed=0)
    with pytest.raises(ValueError):
        gen_dataset("laplace", 4, 4, seed=0)


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.ones((2, 3)), np.array([1.0, 0.0]))
    with pytest.raises(DimensionError):
        Dataset(np.ones((2, 3)), np.array([1.0, -1.0, 1.0]))
    with pytest.raises(DatasetError):
        Dataset(np.array([[np.nan, 1.0]]), np.array([1.0]))


def test_ortho_stats_matches_pairwise_loop(uniform_ds):
    stats = ortho_stats(uniform_ds)
    X = uniform_ds.X
    n = X.shape[0]
    p_max = max(abs(float(np.dot(X[i], X[j]))) for i in range(n) for j in range(n) if i != j)
    norms = [float(np.linalg.norm(x)) for x in X]
    assert stats.p_max == pytest.approx(p_max, rel=1e-12)
    assert stats.r_min == pytest.approx(min(norms), rel=1e-12)
    assert stats.r_max == pytest.approx(max(norms), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_ortho_stats_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    source = ("uniform", "gaussian", "rademacher", "orthogonalized")[seed % 4]
    d = int(rng.integers(8, 65))
    n = int(rng.integers(2, min(d, 24) + 1))
    ds = gen_dataset(source, d, n, seed=seed, scale=float(rng.uniform(0.5, 3.0)))
    stats = ortho_stats(ds)
    X = ds.X
    p_max = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                p_max = max(p_max, abs(sum(a * b for a, b in zip(X[i], X[j]))))
    norms = [sum(a * a for a in x) ** 0.5 for x in X]
    assert stats.p_max == pytest.approx(p_max, rel=1e-9, abs=1e-9)
    assert stats.r_min == pytest.approx(min(norms), rel=1e-12)
    assert stats.r_max == pytest.approx(max(norms), rel=1e-12)
    assert 0.0 <= stats.r_min <= stats.r_max
    assert stats.p_max <= stats.r_max ** 2 * (1 + 1e-12)


def test_gaussian_squared_norm_concentrates():
    d = 3000
    sq_norms = np.array([np.sum(gen_dataset("gaussian", d, 1, seed=s).X ** 2) for s in range(1000)])
    assert np.mean(np.abs(sq_norms - d) <= 5 * np.sqrt(d)) >= 0.99


@pytest.mark.parametrize("d, n", [(3000, 1), (512, 8), (4096, 16)])
def test_uniform_squared_norms_stay_in_band(d, n):
    limit = np.sqrt(d * np.log(1000 * n)) / 2
    inside = [np.max(np.abs(np.sum(gen_dataset("uniform", d, n, seed=s).X ** 2, axis=1) - d / 3)) <= limit
              for s in range(200)]
    assert np.mean(inside) >= (1 - 2 / (1000 * n)) ** n - 0.03


@pytest.mark.parametrize("seed", range(5))
def test_uniform_lemma_claim_a_across_seeds(seed):
    table = verify_uniform_vector_lemma(512, 8, 1000, 200, seed=seed)
    assert table.assertions["claim_a"]
    row = table.frame[table.frame["claim"] == "a"].iloc[0]
    assert row["rate"] >= row["bound"] - 0.03


def test_ortho_stats_single_sample():
    stats = ortho_stats(Dataset(np.array([[3.0, 4.0]]), np.array([1.0])))
    assert stats.p_max == 0.0
    assert stats.r_min == stats.r_max == 5.0


def test_flipped_split_parts():
    split = gen_flipped_split(64, 8, seed=2, robust_fraction=0.5)
    np.testing.assert_allclose(split.natural.X, split.robust + split.nonrobust)
    parts = np.vstack([split.robust, split.nonrobust])
    G = parts @ parts.T
    off = np.abs(G - np.diag(np.diag(G)))
    assert off.max() <= 1e-9 * 64
    np.testing.assert_allclose(np.einsum("ij,ij->i", split.nonrobust, split.nonrobust), 32.0)
    assert split.nonrobust_dataset.y.tolist() == split.natural.y.tolist()


def test_flipped_split_needs_twice_the_samples():
    with pytest.raises(DatasetError):
        gen_flipped_split(15, 8, seed=0)
