import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
import pandas as pd

from boundary import DEGENERATE_NORM, BoundaryModel
from data import Dataset
from formats import adversarial_fingerprint
from net import LossKind, forward_batch, grad_input_batch, loss_slope
from seeding import make_rng
from utils import ConfigError, DegenerateDirectionError, DimensionError

logger = logging.getLogger(__name__)

L0_STEP_SIZE = 0.3
PGD_STEPS = 100
BUDGET_TOL = 1e-12


class Norm(str, Enum):
    L0 = "L0"
    L2 = "L2"
    LINF = "Linf"


class AttackMode(str, Enum):
    GEOMETRY = "geometry"
    PGD = "pgd"
    GRADIENT = "gradient"


class TargetRule(str, Enum):
    RANDOM_PM1 = "random_pm1"
    FLIP = "flip"
    NEXT_LABEL = "next_label"
    EXPLICIT = "explicit"


class Objective(str, Enum):
    SCORE = "score"
    LOSS = "loss"


@dataclass(frozen=True)
class AttackSpec:
    """
    How perturbations are built.

    L2 and Linf take an epsilon budget. L0 takes a pixel budget d_delta; geometry L0
    also needs epsilon, the L2 size of the masked perturbation.
    """

    norm: Norm = Norm.L2
    mode: AttackMode = AttackMode.GEOMETRY
    epsilon: float | None = None
    d_delta: int | None = None
    steps: int | None = None
    step_size: float | None = None
    target_rule: TargetRule = TargetRule.RANDOM_PM1
    seed: int = 0
    explicit_targets: tuple | None = None
    objective: Objective = Objective.SCORE
    loss_kind: LossKind = LossKind.EXPONENTIAL

    def __post_init__(self):
        for name, enum in (("norm", Norm), ("mode", AttackMode), ("target_rule", TargetRule),
                           ("objective", Objective), ("loss_kind", LossKind)):
            try:
                object.__setattr__(self, name, enum(getattr(self, name)))
            except ValueError:
                raise ConfigError(f"attack.{name}", f"unknown value {getattr(self, name)!r}")
        if self.norm is Norm.L0:
            if self.d_delta is None or self.d_delta < 1:
                raise ConfigError("attack.d_delta", "L0 attacks need a positive pixel budget")
        else:
            if self.d_delta is not None:
                raise ConfigError("attack.d_delta", f"{self.norm.value} attacks take epsilon, not d_delta")
            if self.epsilon is None:
                raise ConfigError("attack.epsilon", f"{self.norm.value} attacks need epsilon")
        if self.epsilon is not None and self.epsilon < 0.0:
            raise ConfigError("attack.epsilon", "must be non-negative")
        if self.mode is AttackMode.GRADIENT and self.norm is not Norm.L2:
            raise ConfigError("attack.mode", "gradient-direction attacks are L2 only")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("attack.steps", "must be non-negative")
        if self.target_rule is TargetRule.EXPLICIT and self.explicit_targets is None:
            raise ConfigError("attack.explicit_targets", "explicit rule needs a target vector")

    def resolved_steps(self):
        if self.steps is not None:
            return self.steps
        return self.d_delta if self.norm is Norm.L0 else PGD_STEPS

    def resolved_step_size(self):
        if self.step_size is not None:
            return self.step_size
        if self.norm is Norm.L0:
            return L0_STEP_SIZE
        return self.epsilon / 5.0

    def to_dict(self):
        return {
            "norm": self.norm.value,
            "mode": self.mode.value,
            "epsilon": self.epsilon,
            "d_delta": self.d_delta,
            "steps": self.steps,
            "step_size": self.step_size,
            "target_rule": self.target_rule.value,
            "seed": self.seed,
            "explicit_targets": list(self.explicit_targets) if self.explicit_targets is not None else None,
            "objective": self.objective.value,
            "loss_kind": self.loss_kind.value,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if data.get("explicit_targets") is not None:
            data["explicit_targets"] = tuple(data["explicit_targets"])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class AdvDataset:
    X: np.ndarray
    targets: np.ndarray
    eta: np.ndarray
    base: Dataset
    spec: AttackSpec
    supports: tuple | None = None
    flagged: np.ndarray | None = None
    directions: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.X.shape[0]

    @cached_property
    def provenance_id(self):
        return adversarial_fingerprint(self.X, self.targets)

    def training_set(self):
        return Dataset(self.X, self.targets, self.base.source, self.base.seed, self.base.scale)

    def budget_frame(self):
        """Per-sample budget compliance"""
        frame = pd.DataFrame({
            "l2": np.linalg.norm(self.eta, axis=1),
            "linf": np.abs(self.eta).max(axis=1),
            "l0": np.count_nonzero(self.eta, axis=1),
            "target": self.targets.astype(int),
        })
        if self.flagged is not None:
            frame["flagged"] = self.flagged
        eps = self.spec.epsilon
        if self.spec.norm is Norm.L2:
            frame["within_budget"] = frame["l2"] <= eps * (1.0 + BUDGET_TOL) + BUDGET_TOL
        elif self.spec.norm is Norm.LINF:
            frame["within_budget"] = frame["linf"] <= eps + BUDGET_TOL
        else:
            frame["within_budget"] = frame["l0"] <= self.spec.d_delta
        return frame


def _make_adv(base, eta, targets, spec, supports=None, flagged=None, directions=None):
    return AdvDataset(
        X=base.X + eta,
        targets=np.asarray(targets, dtype=np.float64),
        eta=eta,
        base=base,
        spec=spec,
        supports=supports,
        flagged=flagged,
        directions=directions or {},
    )


def target_labels(rule, base_labels, n, seed, explicit=None):
    """
    Adversarial labels for n samples

    Args:
        rule (TargetRule): random_pm1, flip, next_label (binary: -y) or explicit
        base_labels (numpy.ndarray): Original labels
        n (int): Number of samples
        seed (int): Root seed for the random rule
        explicit (array-like, optional): Targets for the explicit rule

    Returns:
        numpy.ndarray: +1/-1 vector
    """
    rule = TargetRule(rule)
    if rule is TargetRule.RANDOM_PM1:
        rng = make_rng(seed, "attack.targets")
        return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
    if rule is TargetRule.EXPLICIT:
        targets = np.asarray(explicit, dtype=np.float64)
        if targets.shape != (n,):
            raise DimensionError(f"expected {n} explicit targets, got shape {targets.shape}")
        if not np.all(np.abs(targets) == 1.0):
            raise DimensionError("explicit targets must be +1 or -1")
        return targets
    base_labels = np.asarray(base_labels, dtype=np.float64)
    if base_labels.shape != (n,):
        raise DimensionError(f"expected {n} base labels, got shape {base_labels.shape}")
    return -base_labels


def _check_targets(base, targets):
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (base.n,):
        raise DimensionError(f"{base.n} samples but {targets.shape[0]} targets")
    return targets


def _spec_for(norm, spec, **budget):
    if spec is not None:
        return spec
    return AttackSpec(norm=norm, mode=AttackMode.GEOMETRY, target_rule=TargetRule.EXPLICIT,
                      explicit_targets=(), **budget)


def geometry_l2(base, model, eps, targets, spec=None):
    """eta_n = eps * t_n * q/|q| for the boundary direction q of model"""
    targets = _check_targets(base, targets)
    direction = model.unit_direction()
    eta = eps * targets[:, None] * direction[None, :]
    return _make_adv(base, eta, targets, _spec_for(Norm.L2, spec, epsilon=eps), directions={"q": model.q})


def l0_support(q, d_delta):
    """Indices of the d_delta largest |q_i|, ties toward the smaller index, sorted"""
    if d_delta > q.shape[0]:
        raise DimensionError(f"d_delta={d_delta} exceeds d={q.shape[0]}")
    order = np.argsort(-np.abs(q), kind="stable")
    return np.sort(order[:d_delta])


def geometry_l0(base, model, d_delta, targets, eps, spec=None):
    """eta_n = eps * t_n * (q masked to its top-d_delta entries), renormalized"""
    targets = _check_targets(base, targets)
    support = l0_support(model.q, d_delta)
    masked = np.zeros_like(model.q)
    masked[support] = model.q[support]
    norm = np.linalg.norm(masked)
    if norm <= DEGENERATE_NORM:
        raise DegenerateDirectionError("masked boundary direction vanishes")
    eta = eps * targets[:, None] * (masked / norm)[None, :]
    supports = tuple(support for _ in range(base.n))
    spec = _spec_for(Norm.L0, spec, epsilon=eps, d_delta=d_delta)
    return _make_adv(base, eta, targets, spec, supports=supports, directions={"q": model.q})


def geometry_linf(base, model, eps, targets, spec=None):
    targets = _check_targets(base, targets)
    if model.q_norm <= DEGENERATE_NORM:
        raise DegenerateDirectionError("boundary direction vanishes")
    eta = eps * targets[:, None] * np.sign(model.q)[None, :]
    return _make_adv(base, eta, targets, _spec_for(Norm.LINF, spec, epsilon=eps), directions={"q": model.q})


def _ascent_direction(params, cfg, X, targets, spec):
    """Gradient of the attack objective with respect to the inputs, row per sample"""
    grad = targets[:, None] * grad_input_batch(params, cfg, X)
    if spec.objective is Objective.LOSS:
        score = targets * forward_batch(params, cfg, X)
        grad = grad * (-loss_slope(score, spec.loss_kind))[:, None]
    return grad


def _row_unit(G):
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    return np.divide(G, norms, out=np.zeros_like(G), where=norms > 0.0)


def pgd(params, cfg, base, spec, targets):
    """
    Projected gradient ascent on t_n * f(x) around each base point

    L2 takes normalized steps and projects onto the eps-ball; Linf takes sign steps
    and clips to the eps-box; L0 unmasks one pixel per step (largest |gradient|
    among the masked ones), moves the unmasked pixels by a normalized step and
    returns the best-scoring iterate. Samples whose gradient vanishes at the start
    are flagged and left at their base point.

    Returns:
        AdvDataset: perturbed samples
    """
    targets = _check_targets(base, targets)
    if base.d != cfg.d:
        raise DimensionError(f"dataset dimension {base.d} != network dimension {cfg.d}")
    steps = spec.resolved_steps()
    step = spec.resolved_step_size()
    if spec.norm is Norm.L0:
        return _pgd_l0(params, cfg, base, spec, targets, steps, step)

    eps = spec.epsilon
    X0 = base.X
    delta = np.zeros_like(X0)
    flagged = np.zeros(base.n, dtype=bool)
    for i in range(steps):
        grad = _ascent_direction(params, cfg, X0 + delta, targets, spec)
        zero = ~np.any(grad != 0.0, axis=1)
        if i == 0:
            flagged = zero
            if flagged.any():
                logger.warning("%d samples have a vanishing gradient at the start", int(flagged.sum()))
        active = (~flagged & ~zero)[:, None]
        if spec.norm is Norm.L2:
            delta = delta + np.where(active, step * _row_unit(grad), 0.0)
            norms = np.linalg.norm(delta, axis=1, keepdims=True)
            shrink = np.divide(eps, norms, out=np.ones_like(norms), where=norms > eps)
            delta = delta * shrink
        else:
            delta = delta + np.where(active, step * np.sign(grad), 0.0)
            delta = np.clip(delta, -eps, eps)
    return _make_adv(base, delta, targets, spec, flagged=flagged)


def _pgd_l0(params, cfg, base, spec, targets, steps, step):
    X0 = base.X
    n, d = X0.shape
    delta = np.zeros_like(X0)
    unmasked = np.zeros((n, d), dtype=bool)
    best = np.zeros_like(X0)
    best_score = targets * forward_batch(params, cfg, X0)
    flagged = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    for i in range(steps):
        grad = _ascent_direction(params, cfg, X0 + delta, targets, spec)
        if i == 0:
            flagged = ~np.any(grad != 0.0, axis=1)
            if flagged.any():
                logger.warning("%d samples have a vanishing gradient at the start", int(flagged.sum()))
        can_grow = unmasked.sum(axis=1) < spec.d_delta
        candidates = np.where(unmasked, -np.inf, np.abs(grad))
        pick = np.argmax(candidates, axis=1)
        grow = can_grow & ~flagged
        unmasked[rows[grow], pick[grow]] = True

        g_support = np.where(unmasked, grad, 0.0)
        update = step * _row_unit(g_support)
        delta = delta + np.where(flagged[:, None], 0.0, update)

        score = targets * forward_batch(params, cfg, X0 + delta)
        improved = score > best_score
        best[improved] = delta[improved]
        best_score = np.where(improved, score, best_score)

    supports = tuple(np.flatnonzero(row) for row in best)
    return _make_adv(base, best, targets, spec, supports=supports, flagged=flagged)


def gradient_directions(params, cfg, dataset):
    """
    Unit class directions s_plus, s_minus: the mean input gradient of the network
    over positive and over negative samples

    For a network in the two-row (v, u) structure whose activation pattern holds on
    the data, s_plus is along v - gamma*u and s_minus along gamma*v - u.
    """
    grads = grad_input_batch(params, cfg, dataset.X)
    directions = []
    for mask, name in ((dataset.positive, "positive"), (~dataset.positive, "negative")):
        if not mask.any():
            raise DegenerateDirectionError(f"no {name} samples to build a class direction")
        s = grads[mask].mean(axis=0)
        norm = np.linalg.norm(s)
        if norm <= DEGENERATE_NORM:
            raise DegenerateDirectionError(f"{name} class gradient vanishes")
        directions.append(s / norm)
    return directions[0], directions[1]


def gradient_l2(params, cfg, base, eps, targets, class_data=None, spec=None):
    """eta_n = eps * t_n * s_{sign y_n}, with class directions from class_data (default base)"""
    targets = _check_targets(base, targets)
    s_plus, s_minus = gradient_directions(params, cfg, class_data if class_data is not None else base)
    rows = np.where(base.positive[:, None], s_plus[None, :], s_minus[None, :])
    eta = eps * targets[:, None] * rows
    spec = spec or AttackSpec(norm=Norm.L2, mode=AttackMode.GRADIENT, epsilon=eps,
                              target_rule=TargetRule.EXPLICIT, explicit_targets=())
    return _make_adv(base, eta, targets, spec, directions={"s_plus": s_plus, "s_minus": s_minus})


def generate(base, spec, targets=None, model=None, params=None, cfg=None, class_data=None):
    """
    Build an adversarial dataset according to spec

    Args:
        base (Dataset): Points to perturb
        spec (AttackSpec): Norm, mode and budget
        targets (numpy.ndarray, optional): Adversarial labels; derived from spec when omitted
        model (BoundaryModel, optional): Needed by geometry attacks
        params, cfg: Network, needed by pgd and gradient attacks
        class_data (Dataset, optional): Labelled data for the gradient class directions

    Returns:
        AdvDataset: perturbed samples and their targets
    """
    if targets is None:
        targets = target_labels(spec.target_rule, base.y, base.n, spec.seed, spec.explicit_targets)
    if spec.mode is AttackMode.GEOMETRY:
        if not isinstance(model, BoundaryModel):
            raise ConfigError("attack.mode", "geometry attacks need a boundary model")
        if spec.norm is Norm.L2:
            return geometry_l2(base, model, spec.epsilon, targets, spec=spec)
        if spec.norm is Norm.LINF:
            return geometry_linf(base, model, spec.epsilon, targets, spec=spec)
        if spec.epsilon is None:
            raise ConfigError("attack.epsilon", "geometry L0 attacks need epsilon")
        return geometry_l0(base, model, spec.d_delta, targets, spec.epsilon, spec=spec)
    if params is None or cfg is None:
        raise ConfigError("attack.mode", f"{spec.mode.value} attacks need a network")
    if spec.mode is AttackMode.PGD:
        return pgd(params, cfg, base, spec, targets)
    return gradient_l2(params, cfg, base, spec.epsilon, targets, class_data=class_data, spec=spec)
