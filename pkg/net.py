import logging
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from seeding import make_rng
from utils import DimensionError, chunked_reduce

logger = logging.getLogger(__name__)


class LossKind(str, Enum):
    EXPONENTIAL = "exponential"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class NetworkConfig:
    """
    One hidden layer of width m with leaky-ReLU slope gamma and a frozen +-1/sqrt(m) output layer.
    The first m_plus rows carry +1/sqrt(m); the rest carry -1/sqrt(m).
    """

    d: int
    m: int = 128
    gamma: float = 0.5
    init_scale: float = 0.01
    m_plus: int | None = None

    def __post_init__(self):
        if self.d < 1:
            raise DimensionError(f"d must be positive, got {self.d}")
        if self.m < 2:
            raise DimensionError(f"m must be at least 2, got {self.m}")
        if not 0.0 < self.gamma < 1.0:
            raise DimensionError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.init_scale < 0.0:
            raise DimensionError("init_scale must be non-negative")
        if self.m_plus is None:
            if self.m % 2:
                raise DimensionError("odd width needs an explicit m_plus")
            object.__setattr__(self, "m_plus", self.m // 2)
        if not 1 <= self.m_plus <= self.m - 1:
            raise DimensionError(f"m_plus must lie in [1, m-1], got {self.m_plus}")

    @property
    def m_minus(self):
        return self.m - self.m_plus

    @property
    def balanced(self):
        return self.m_plus == self.m_minus

    def output_weights(self):
        a = np.full(self.m, -1.0 / np.sqrt(self.m))
        a[: self.m_plus] = 1.0 / np.sqrt(self.m)
        return a

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True, eq=False)
class NetworkParams:
    W: np.ndarray

    def __post_init__(self):
        W = np.ascontiguousarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise DimensionError(f"W must be m x d, got shape {W.shape}")
        object.__setattr__(self, "W", W)

    def check(self, cfg):
        if self.W.shape != (cfg.m, cfg.d):
            raise DimensionError(f"W has shape {self.W.shape}, config expects {(cfg.m, cfg.d)}")
        return self

    def copy(self):
        return NetworkParams(self.W.copy())


def leaky_relu(z, gamma):
    return np.where(z > 0.0, z, gamma * z)


def leaky_relu_grad(z, gamma):
    # slope at exactly zero is gamma
    return np.where(z > 0.0, 1.0, gamma)


def init_params(cfg, seed):
    """Gaussian init with entry std init_scale/sqrt(d); init_scale 0 gives exact zeros"""
    if cfg.init_scale == 0.0:
        return NetworkParams(np.zeros((cfg.m, cfg.d)))
    rng = make_rng(seed, "net.init")
    return NetworkParams(rng.standard_normal((cfg.m, cfg.d)) * (cfg.init_scale / np.sqrt(cfg.d)))


def _as_matrix(X, cfg):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != cfg.d:
        raise DimensionError(f"input has dimension {X.shape[-1]}, network expects {cfg.d}")
    return X


def forward(params, cfg, x):
    """Scalar output f(x) = a^T phi(W x) for one input vector"""
    x = _as_matrix(x, cfg)
    if x.ndim != 1:
        raise DimensionError("forward takes a single vector; use forward_batch")
    return float(cfg.output_weights() @ leaky_relu(params.W @ x, cfg.gamma))


def forward_batch(params, cfg, X):
    X = _as_matrix(X, cfg)
    return leaky_relu(X @ params.W.T, cfg.gamma) @ cfg.output_weights()


def margins(params, cfg, dataset):
    return dataset.y * forward_batch(params, cfg, dataset.X)


def loss_value(margin, kind):
    kind = LossKind(kind)
    if kind is LossKind.EXPONENTIAL:
        return np.exp(-margin)
    return np.logaddexp(0.0, -margin)


def loss_slope(margin, kind):
    """Derivative of the per-sample loss with respect to the margin"""
    kind = LossKind(kind)
    if kind is LossKind.EXPONENTIAL:
        return -np.exp(-margin)
    return -expit(-margin)


def loss(params, cfg, dataset, kind):
    return float(np.mean(loss_value(margins(params, cfg, dataset), kind)))


def loss_and_grad(params, cfg, dataset, kind, threads=1):
    """
    Empirical loss and its gradient with respect to W

    The sample sum is split into fixed chunks and reduced pairwise, so the result
    does not depend on the number of worker threads.

    Returns:
        tuple: (loss, m x d gradient)
    """
    X = _as_matrix(dataset.X, cfg)
    y = dataset.y
    a = cfg.output_weights()
    W = params.W

    def chunk(start, stop):
        Xc = X[start:stop]
        H = Xc @ W.T
        z = y[start:stop] * (leaky_relu(H, cfg.gamma) @ a)
        coef = loss_slope(z, kind) * y[start:stop]
        D = leaky_relu_grad(H, cfg.gamma) * a[None, :] * coef[:, None]
        return np.concatenate([[np.sum(loss_value(z, kind))], (D.T @ Xc).ravel()])

    total = chunked_reduce(chunk, dataset.n, threads=threads) / dataset.n
    return float(total[0]), total[1:].reshape(W.shape)


def grad_loss(params, cfg, dataset, kind, threads=1):
    return loss_and_grad(params, cfg, dataset, kind, threads=threads)[1]


def grad_input(params, cfg, x):
    """Input gradient W^T (a * phi'(W x)) for one vector"""
    x = _as_matrix(x, cfg)
    slope = leaky_relu_grad(params.W @ x, cfg.gamma)
    return params.W.T @ (cfg.output_weights() * slope)


def grad_input_batch(params, cfg, X):
    X = _as_matrix(X, cfg)
    slope = leaky_relu_grad(X @ params.W.T, cfg.gamma)
    return (slope * cfg.output_weights()[None, :]) @ params.W
