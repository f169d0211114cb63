import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from seeding import make_rng
from utils import DatasetError, DimensionError

logger = logging.getLogger(__name__)

# Relative tolerance below which a Gram-Schmidt residual counts as rank deficient
RANK_TOL = 1e-10


class Source(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    ORTHOGONALIZED = "orthogonalized"
    FILE = "file"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled sample matrix; X is N x d float64, y holds +1/-1 as float64"""

    X: np.ndarray
    y: np.ndarray
    source: Source = Source.FILE
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64).ravel()
        if X.ndim != 2:
            raise DimensionError(f"X must be a matrix, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DimensionError(f"{X.shape[0]} samples but {y.shape[0]} labels")
        if X.shape[0] == 0 or X.shape[1] == 0:
            raise DatasetError("empty dataset")
        if not np.all(np.isfinite(X)):
            raise DatasetError("X contains non-finite entries")
        if not np.all(np.abs(y) == 1.0):
            raise DatasetError("labels must be +1 or -1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def positive(self):
        return self.y > 0

    def with_labels(self, y):
        return Dataset(self.X, y, self.source, self.seed, self.scale)

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.source, self.seed, self.scale)

    def same_as(self, other):
        """Bitwise equality of samples, labels and metadata"""
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and self.source == other.source
            and self.seed == other.seed
            and self.scale == other.scale
        )


@dataclass(frozen=True)
class OrthoStats:
    r_min: float
    r_max: float
    p_max: float

    def to_dict(self):
        return {"r_min": self.r_min, "r_max": self.r_max, "p_max": self.p_max}


@dataclass(frozen=True, eq=False)
class FlippedSplit:
    """Natural data whose samples are a robust part plus an orthogonal non-robust part"""

    natural: Dataset
    robust: np.ndarray
    nonrobust: np.ndarray

    @property
    def nonrobust_dataset(self):
        return Dataset(self.nonrobust, self.natural.y, Source.ORTHOGONALIZED, self.natural.seed)


def _random_labels(rng, n):
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def gen_dataset(source, d, n, seed, scale=1.0):
    """
    Generate N samples of dimension d with uniformly random labels

    Args:
        source (Source): Entry distribution
        d (int): Dimension
        n (int): Number of samples
        seed (int): Root seed; the generator stream is tagged "data.gen"
        scale (float): Entry scale (half-width, std, or magnitude)

    Returns:
        Dataset: The samples
    """
    source = Source(source)
    if d < 1 or n < 1:
        raise DatasetError(f"d and N must be positive, got d={d}, N={n}")
    if source is Source.FILE:
        raise DatasetError("file datasets are loaded with formats.read_dataset")
    if source is Source.ORTHOGONALIZED:
        return gen_orthogonal_dataset(d, n, seed, norm=scale * np.sqrt(d))

    rng = make_rng(seed, "data.gen")
    if source is Source.UNIFORM:
        X = rng.uniform(-1.0, 1.0, size=(n, d)) * scale
    elif source is Source.GAUSSIAN:
        X = rng.standard_normal((n, d)) * scale
    else:
        X = (rng.integers(0, 2, size=(n, d)).astype(np.float64) * 2.0 - 1.0) * scale
    y = _random_labels(rng, n)
    logger.debug("generated %s dataset d=%d N=%d seed=%d", source.value, d, n, seed)
    return Dataset(X, y, source, seed, scale)


def modified_gram_schmidt(A, passes=2):
    """
    Orthonormalize the rows of A in order

    Args:
        A (numpy.ndarray): N x d matrix with N <= d
        passes (int): Re-orthogonalization passes

    Returns:
        numpy.ndarray: N x d matrix with orthonormal rows
    """
    Q = np.array(A, dtype=np.float64, copy=True)
    scale = np.linalg.norm(Q, axis=1)
    for _ in range(passes):
        for k in range(Q.shape[0]):
            norm = np.linalg.norm(Q[k])
            if norm <= RANK_TOL * max(scale[k], 1.0):
                raise DatasetError(f"row {k} is linearly dependent on earlier rows")
            Q[k] /= norm
            if k + 1 < Q.shape[0]:
                Q[k + 1:] -= np.outer(Q[k + 1:] @ Q[k], Q[k])
    return Q


def gen_orthogonal_dataset(d, n, seed, norm=None):
    """
    Mutually orthogonal samples of equal norm (default sqrt(d)) with random labels

    Raises:
        DatasetError: if N > d
    """
    if n > d:
        raise DatasetError(f"cannot place {n} orthogonal vectors in dimension {d}")
    if n < 1:
        raise DatasetError("N must be positive")
    if norm is None:
        norm = np.sqrt(d)
    rng = make_rng(seed, "data.orthogonal")
    basis = modified_gram_schmidt(rng.standard_normal((n, d)))
    X = basis * norm
    y = _random_labels(rng, n)
    return Dataset(X, y, Source.ORTHOGONALIZED, seed, norm / np.sqrt(d))


def gen_flipped_split(d, n, seed, robust_fraction=0.5):
    """
    Natural samples x_n = x_rob_n + x_non_n with all 2N parts mutually orthogonal

    Args:
        d (int): Dimension, at least 2N
        n (int): Number of samples
        seed (int): Root seed
        robust_fraction (float): Share of the squared norm d carried by the robust part

    Returns:
        FlippedSplit: Natural dataset plus both parts
    """
    if not 0.0 <= robust_fraction < 1.0:
        raise DatasetError(f"robust_fraction must lie in [0, 1), got {robust_fraction}")
    if 2 * n > d:
        raise DatasetError(f"flipped split needs d >= 2N, got d={d}, N={n}")
    parts = gen_orthogonal_dataset(d, 2 * n, seed, norm=1.0)
    robust = parts.X[:n] * np.sqrt(robust_fraction * d)
    nonrobust = parts.X[n:] * np.sqrt((1.0 - robust_fraction) * d)
    y = _random_labels(make_rng(seed, "data.flipped_labels"), n)
    natural = Dataset(robust + nonrobust, y, Source.ORTHOGONALIZED, seed, 1.0)
    return FlippedSplit(natural, robust, nonrobust)


def ortho_stats(dataset):
    """
    Exact norm range and largest off-diagonal inner product

    Args:
        dataset (Dataset): Samples

    Returns:
        OrthoStats: r_min, r_max and p_max (0 for a single sample)
    """
    X = dataset.X
    norms = np.linalg.norm(X, axis=1)
    if X.shape[0] == 1:
        p_max = 0.0
    else:
        G = np.abs(X @ X.T)
        np.fill_diagonal(G, 0.0)
        p_max = float(G.max())
    return OrthoStats(float(norms.min()), float(norms.max()), p_max)
