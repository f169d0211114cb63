import logging
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from data import Dataset
from net import NetworkConfig, NetworkParams, forward_batch, margins
from seeding import make_rng
from utils import (
    DegenerateDirectionError,
    DimensionError,
    LambdaSolveError,
    ProbeError,
    compensated_row_sum,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
DEGENERATE_NORM = 1e-12


class BoundaryMode(str, Enum):
    LAMBDA_EXACT = "lambda_exact"
    EMPIRICAL_VU = "empirical_vu"


@dataclass(frozen=True)
class BoundaryTerms:
    t1: float
    t2: float

    @property
    def total(self):
        return self.t1 + self.t2

    def to_dict(self):
        return {"t1": self.t1, "t2": self.t2}


@dataclass(frozen=True)
class AgreementResult:
    rate: float
    n_excluded: int
    n_probes: int

    def to_dict(self):
        return {"rate": self.rate, "n_excluded": self.n_excluded, "n_probes": self.n_probes}


@dataclass(frozen=True, eq=False)
class BoundaryModel:
    """
    Linear decision boundary of a converged network.

    lambda_exact keeps the reference dataset and its dual coefficients; the boundary
    is sum_n weight_n * lambda_n * y_n * <x_n, z>, with unit weights unless a general
    hidden-layer split was given. empirical_vu keeps averaged hidden rows v and u and
    evaluates <v - u, z>.
    """

    mode: BoundaryMode
    q: np.ndarray
    dataset: Dataset | None = None
    lambdas: np.ndarray | None = None
    weights: np.ndarray | None = None
    v: np.ndarray | None = None
    u: np.ndarray | None = None

    @classmethod
    def from_lambdas(cls, dataset, lambdas, weights=None):
        lambdas = np.asarray(lambdas, dtype=np.float64)
        if lambdas.shape != (dataset.n,):
            raise DimensionError(f"expected {dataset.n} coefficients, got shape {lambdas.shape}")
        if np.any(lambdas <= 0.0):
            raise LambdaSolveError("non_positive", "every coefficient must be positive")
        coef = lambdas * dataset.y
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            coef = coef * weights
        q = compensated_row_sum(dataset.X, coef)
        return cls(BoundaryMode.LAMBDA_EXACT, q, dataset=dataset, lambdas=lambdas, weights=weights)

    @classmethod
    def from_vu(cls, v, u):
        v = np.asarray(v, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if v.shape != u.shape or v.ndim != 1:
            raise DimensionError("v and u must be vectors of equal length")
        return cls(BoundaryMode.EMPIRICAL_VU, v - u, v=v, u=u)

    @property
    def d(self):
        return self.q.shape[0]

    @property
    def q_norm(self):
        return float(np.linalg.norm(self.q))

    def unit_direction(self):
        norm = self.q_norm
        if norm <= DEGENERATE_NORM:
            raise DegenerateDirectionError(f"boundary direction has norm {norm:.3g}")
        return self.q / norm

    def evaluate(self, Z):
        """Boundary value for each row of Z (or for a single vector)"""
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape[-1] != self.d:
            raise DimensionError(f"probe dimension {Z.shape[-1]} != boundary dimension {self.d}")
        if self.mode is BoundaryMode.EMPIRICAL_VU:
            return Z @ self.q
        coef = self.lambdas * self.dataset.y
        if self.weights is not None:
            coef = coef * self.weights
        return (Z @ self.dataset.X.T) @ coef

    __call__ = evaluate

    def to_dict(self):
        data = {"mode": self.mode.value, "q_norm": self.q_norm}
        if self.lambdas is not None:
            data["lambda_min"] = float(self.lambdas.min())
            data["lambda_max"] = float(self.lambdas.max())
        return data


def _margin_system(dataset, gamma, m_plus, m_minus):
    m = m_plus + m_minus
    pos = dataset.positive
    cv = np.where(pos, 1.0, -gamma)
    cu = np.where(pos, -gamma, 1.0)
    alpha = np.where(pos, m_plus, -gamma * m_plus)
    beta = np.where(pos, gamma * m_minus, -m_minus)
    G = dataset.X @ dataset.X.T
    return G * (alpha[:, None] * cv[None, :] - beta[:, None] * cu[None, :]) / m


def vu_from_lambdas(dataset, lambdas, gamma, m):
    """Hidden rows v, u of the converged network for dual coefficients lambdas"""
    pos = dataset.positive
    lam_pos = np.where(pos, lambdas, 0.0)
    lam_neg = np.where(pos, 0.0, lambdas)
    scale = 1.0 / np.sqrt(m)
    v = compensated_row_sum(dataset.X, (lam_pos - gamma * lam_neg) * scale)
    u = compensated_row_sum(dataset.X, (lam_neg - gamma * lam_pos) * scale)
    return v, u


def build_wstd(dataset, lambdas, cfg):
    """m_plus copies of v stacked over m_minus copies of u"""
    if dataset.d != cfg.d:
        raise DimensionError(f"dataset dimension {dataset.d} != network dimension {cfg.d}")
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (dataset.n,):
        raise DimensionError(f"expected {dataset.n} coefficients, got shape {lambdas.shape}")
    v, u = vu_from_lambdas(dataset, lambdas, cfg.gamma, cfg.m)
    W = np.vstack([np.tile(v, (cfg.m_plus, 1)), np.tile(u, (cfg.m_minus, 1))])
    return NetworkParams(W)


def solve_lambda(dataset, gamma, m_plus, m_minus):
    """
    Dual coefficients of the converged network, i.e. lambdas with y_n f(x_n; W_std) = 1

    The margin system is linear in lambda once every sample activates v on its own
    class side and u on the other. It is solved by dense LU and the activation
    pattern and unit margins are then checked on the actual network.

    Raises:
        LambdaSolveError: reason is one of "singular", "non_positive",
            "sign_pattern" or "residual"
    """
    A = _margin_system(dataset, gamma, m_plus, m_minus)
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            lu, piv = lu_factor(A)
        except (LinAlgWarning, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("lambda system is singular: %s", exc)
            raise LambdaSolveError("singular", str(exc))
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= np.finfo(float).eps * pivots.max() * dataset.n:
        logger.warning("lambda system is numerically singular")
        raise LambdaSolveError("singular", "vanishing pivot in LU factorization")
    lambdas = lu_solve((lu, piv), np.ones(dataset.n))

    if not np.all(np.isfinite(lambdas)) or np.any(lambdas <= 0.0):
        logger.warning("lambda solve produced %d non-positive coefficients", int(np.sum(~(lambdas > 0.0))))
        raise LambdaSolveError("non_positive", "some coefficients are not positive")

    m = m_plus + m_minus
    v, u = vu_from_lambdas(dataset, lambdas, gamma, m)
    pv = dataset.X @ v
    pu = dataset.X @ u
    pos = dataset.positive
    pattern = np.where(pos, (pv > 0.0) & (pu < 0.0), (pv < 0.0) & (pu > 0.0))
    if not np.all(pattern):
        logger.warning("activation pattern violated on %d samples", int(np.sum(~pattern)))
        raise LambdaSolveError("sign_pattern", f"{int(np.sum(~pattern))} samples break the activation pattern")

    cfg = NetworkConfig(d=dataset.d, m=m, gamma=gamma, m_plus=m_plus)
    residual = np.abs(margins(build_wstd(dataset, lambdas, cfg), cfg, dataset) - 1.0)
    if residual.max() > RESIDUAL_TOL:
        logger.warning("lambda residual %.3g exceeds %.1g", residual.max(), RESIDUAL_TOL)
        raise LambdaSolveError("residual", f"max margin residual {residual.max():.3g}")
    return lambdas


def split_weights(dataset, gamma, m_plus, m_minus):
    """Per-sample weights of the boundary under an unbalanced hidden-layer split"""
    return np.where(dataset.positive, m_plus + gamma * m_minus, gamma * m_plus + m_minus)


def fbdy_eval(model, z):
    return float(model.evaluate(z))


def fbdy_general(dataset, lambdas, gamma, m_plus, m_minus, z):
    weights = split_weights(dataset, gamma, m_plus, m_minus)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != dataset.d:
        raise DimensionError(f"probe dimension {z.shape[-1]} != dataset dimension {dataset.d}")
    return float((dataset.X @ z) @ (weights * lambdas * dataset.y))


def extract_vu(params, cfg):
    params.check(cfg)
    return params.W[: cfg.m_plus].mean(axis=0), params.W[cfg.m_plus:].mean(axis=0)


def network_evaluator(params, cfg):
    return lambda Z: forward_batch(params, cfg, np.atleast_2d(Z))


def boundary_evaluator(model):
    return lambda Z: model.evaluate(np.atleast_2d(Z))


def gaussian_probes(d, n, seed, norm=None):
    """Gaussian probes rescaled to norm sqrt(d)"""
    rng = make_rng(seed, "boundary.probes")
    Z = rng.standard_normal((n, d))
    norm = np.sqrt(d) if norm is None else norm
    return Z * (norm / np.linalg.norm(Z, axis=1, keepdims=True))


def sign_agreement(f_a, f_b, probes, band=1e-3):
    """
    Fraction of probes on which two classifiers agree in sign

    Probes where either value lies within band * median|f_b| of zero are excluded.

    Args:
        f_a, f_b (callable): Map a k x d probe matrix to k values
        probes (numpy.ndarray): k x d
        band (float): Relative exclusion band

    Returns:
        AgreementResult: rate and exclusion count
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if probes.shape[0] == 0:
        raise ProbeError("no probes given")
    a = np.asarray(f_a(probes), dtype=np.float64)
    b = np.asarray(f_b(probes), dtype=np.float64)
    threshold = band * np.median(np.abs(b))
    keep = (np.minimum(np.abs(a), np.abs(b)) >= threshold) & (a != 0.0) & (b != 0.0)
    kept = int(keep.sum())
    if kept == 0:
        raise ProbeError(f"all {probes.shape[0]} probes fall inside the exclusion band")
    rate = float(np.mean(np.sign(a[keep]) == np.sign(b[keep])))
    return AgreementResult(rate, probes.shape[0] - kept, probes.shape[0])


def boundary_terms(nat_model, adv_lambdas, adv_targets, epsilon, z, base=None, adv_weights=None):
    """
    Split the boundary learned from geometry-L2 perturbations into its two parts

    t1 is the lambda_adv-weighted vote of the unperturbed base points under their
    adversarial targets; t2 is epsilon times the natural boundary along its unit
    direction.

    Args:
        nat_model (BoundaryModel): lambda_exact model of the natural data
        adv_lambdas (numpy.ndarray): Coefficients of the adversarial training set
        adv_targets (numpy.ndarray): Adversarial labels
        epsilon (float): Perturbation size
        z (numpy.ndarray): Probe vector
        base (numpy.ndarray, optional): Unperturbed points; the natural samples by default
        adv_weights (numpy.ndarray, optional): General-split weights for both sums

    Returns:
        BoundaryTerms: (t1, t2)
    """
    if nat_model.mode is not BoundaryMode.LAMBDA_EXACT:
        raise DegenerateDirectionError("boundary terms need a lambda_exact model")
    z = np.asarray(z, dtype=np.float64)
    base = nat_model.dataset.X if base is None else np.asarray(base, dtype=np.float64)
    weights = np.ones(len(adv_lambdas)) if adv_weights is None else np.asarray(adv_weights)
    lam = np.asarray(adv_lambdas, dtype=np.float64) * weights
    if base.shape[0] != lam.shape[0]:
        raise DimensionError(f"{base.shape[0]} base points but {lam.shape[0]} coefficients")
    q_norm = nat_model.q_norm
    if q_norm <= DEGENERATE_NORM:
        raise DegenerateDirectionError(f"natural boundary direction has norm {q_norm:.3g}")
    t1 = float((base @ z) @ (lam * adv_targets) / lam.sum())
    t2 = float(epsilon * nat_model.evaluate(z) / q_norm)
    return BoundaryTerms(t1, t2)


def adversarial_boundary(adv_X, adv_lambdas, adv_targets, z, adv_weights=None):
    """Normalized boundary learned from (adv_X, adv_targets) with coefficients adv_lambdas"""
    lam = np.asarray(adv_lambdas, dtype=np.float64)
    if adv_weights is not None:
        lam = lam * np.asarray(adv_weights)
    return float((np.asarray(adv_X) @ np.asarray(z, dtype=np.float64)) @ (lam * adv_targets) / lam.sum())


@dataclass(frozen=True, eq=False)
class DecisionMap:
    alphas: np.ndarray
    betas: np.ndarray
    signs: np.ndarray
    projections: tuple

    def to_frame(self):
        aa, bb = np.meshgrid(self.alphas, self.betas)
        return pd.DataFrame({"alpha": aa.ravel(), "beta": bb.ravel(), "sign": self.signs.ravel().astype(int)})

    def points_frame(self):
        rows = []
        for coords, labels in self.projections:
            rows.append(pd.DataFrame({"alpha": coords[:, 0], "beta": coords[:, 1], "label": labels.astype(int)}))
        if not rows:
            return pd.DataFrame(columns=["alpha", "beta", "label"])
        return pd.concat(rows, ignore_index=True)

    @classmethod
    def from_frames(cls, grid, points=None):
        alphas = np.unique(grid["alpha"].to_numpy())
        betas = np.unique(grid["beta"].to_numpy())
        ordered = grid.sort_values(["beta", "alpha"])
        signs = ordered["sign"].to_numpy().reshape(len(betas), len(alphas))
        projections = ()
        if points is not None and len(points):
            projections = ((points[["alpha", "beta"]].to_numpy(), points["label"].to_numpy()),)
        return cls(alphas, betas, signs, projections)

    def agreement(self, other):
        if self.signs.shape != other.signs.shape:
            raise DimensionError("decision maps differ in resolution")
        return float(np.mean(self.signs == other.signs))


def plane_basis(v, u):
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    nv = np.linalg.norm(v)
    nu = np.linalg.norm(u)
    if nv == 0.0 or nu == 0.0:
        raise DegenerateDirectionError("plane axes must be nonzero")
    v_hat = v / nv
    u_hat = u / nu
    if abs(np.dot(v_hat, u_hat)) > 1.0 - 1e-12:
        raise DegenerateDirectionError("v and u are parallel")
    return v_hat, u_hat


def decision_map(f, v, u, half_width, resolution, datasets=()):
    """
    Signs of f over the plane spanned by the unit vectors along v and u

    Args:
        f (callable): Maps a k x d matrix to k values
        v, u (numpy.ndarray): Plane axes, linearly independent
        half_width (float): Grid covers [-half_width, half_width] on both axes
        resolution (int): Points per axis
        datasets (iterable): Datasets whose samples are projected onto the plane

    Returns:
        DecisionMap: sign grid indexed [beta, alpha] and projected points
    """
    v_hat, u_hat = plane_basis(v, u)
    grid = np.linspace(-half_width, half_width, resolution)
    aa, bb = np.meshgrid(grid, grid)
    Z = aa.ravel()[:, None] * v_hat[None, :] + bb.ravel()[:, None] * u_hat[None, :]
    signs = np.sign(np.asarray(f(Z), dtype=np.float64)).reshape(resolution, resolution)
    basis = np.vstack([v_hat, u_hat]).T
    projections = []
    for ds in datasets:
        coords, *_ = np.linalg.lstsq(basis, ds.X.T, rcond=None)
        projections.append((coords.T, ds.y))
    return DecisionMap(grid, grid.copy(), signs, tuple(projections))
