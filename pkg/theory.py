import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from attack import TargetRule, geometry_l2, target_labels
from boundary import BoundaryModel, boundary_terms, solve_lambda
from data import gen_orthogonal_dataset, ortho_stats
from seeding import derive_seed, make_rng
from utils import DegenerateDirectionError, LambdaSolveError, ProbeError, records_to_frame

logger = logging.getLogger(__name__)

# Monte-Carlo tolerance in binomial standard errors
MC_SIGMAS = 3.0
# Factor band for growth statements whose constants are unspecified
BAND_FACTOR = 4.0

TABLE_COLUMNS = ["d", "n", "statistic", "normalized_ratio"]


@dataclass(frozen=True)
class ConditionReport:
    name: str
    lhs: float
    rhs: float
    constants: dict = field(default_factory=dict)
    case: int | None = None
    parts: tuple = ()

    @property
    def passed(self):
        return bool(self.lhs >= self.rhs)

    def to_dict(self):
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "constants": dict(self.constants),
            "case": self.case,
            "pass": self.passed,
            "parts": [p.to_dict() for p in self.parts],
        }

    def summary(self):
        verdict = "PASS" if self.passed else "FAIL"
        case = f" (case {self.case})" if self.case is not None else ""
        return f"{verdict} {self.name}{case}: lhs={self.lhs:.6g} rhs={self.rhs:.6g}"


@dataclass(frozen=True, eq=False)
class ProbeTable:
    """Rows of (d, n, statistic, normalized_ratio, ...) plus named finite-size assertions"""

    frame: object
    assertions: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.assertions.values())

    def to_dict(self):
        return {"rows": self.frame.to_dict(orient="records"), "assertions": dict(self.assertions)}

    def to_csv(self, path):
        self.frame.to_csv(path, index=False)


class ProbeFamily(str, Enum):
    WEAK_ALL = "weak_all"
    STRONG_ONE = "strong_one"


class LabelRule(str, Enum):
    RANDOM = "random"
    DETERMINISTIC = "deterministic"


def check_theorem1(stats, n, gamma):
    """gamma^3 r_min^4 / (3 n r_max^2) >= p_max"""
    r2max = stats.r_max ** 2
    lhs = gamma ** 3 * (stats.r_min ** 2) ** 2 / (3 * n * r2max) if r2max > 0.0 else 0.0
    return ConditionReport("theorem1", lhs, stats.p_max, {"gamma": gamma, "n": n})


def natural_condition_constant(stats, gamma):
    if stats.r_min == 0.0:
        return math.inf
    return (3 * stats.r_max ** 4 + gamma ** 3 * stats.r_min ** 4) / (
        gamma ** 2 * stats.r_min ** 3 * math.sqrt(1.0 - gamma)
    )


def check_natural_condition(stats, n, gamma, eps):
    """
    Near-orthogonality of naturally perturbed samples, in the regime chosen by n

    With C = (3 r_max^4 + gamma^3 r_min^4) / (gamma^2 r_min^3 sqrt(1 - gamma)):
    case 1 for n <= C^2/r_max^2, case 2 up to C^2/r_min^2, case 3 beyond.
    """
    C = natural_condition_constant(stats, gamma)
    r_min, r_max = stats.r_min, stats.r_max
    cross = C / math.sqrt(n) * eps if eps > 0.0 else 0.0
    g3 = gamma ** 3
    if n <= C ** 2 / r_max ** 2:
        case = 1
        lhs = g3 * ((r_min - eps) ** 2) ** 2 / (3 * n * (r_max + eps) ** 2) - 2 * eps * r_max - eps ** 2
    elif n <= C ** 2 / r_min ** 2:
        case = 2
        lhs = g3 * ((r_min - eps) ** 2) ** 2 / (3 * n * (r_max ** 2 + 2 * cross + eps ** 2)) - 2 * cross - eps ** 2
    else:
        case = 3
        lhs = (
            g3 * (r_min ** 2 - 2 * cross + eps ** 2) ** 2 / (3 * n * (r_max ** 2 + 2 * cross + eps ** 2))
            - 2 * cross
            - eps ** 2
        )
    return ConditionReport("natural", lhs, stats.p_max, {"C": C, "eps": eps, "gamma": gamma, "n": n}, case=case)


def uniform_main_inequality(d, n_adv, eps, gamma):
    """Main inequality for perturbed uniform noise, C = ln(1000 n_adv)"""
    C = math.log(1000 * n_adv)
    a = 3 * math.sqrt(C * d)
    b = 12 * math.sqrt(2 * C) * eps
    e2 = 6 * eps ** 2
    lhs = gamma ** 3 * (2 * d - a - b + e2) ** 2 / (18 * n_adv * (2 * d + a + b + e2))
    rhs = math.sqrt(2 * C * d) + 2 * math.sqrt(2 * C) * eps + eps ** 2
    return ConditionReport("uniform_main", lhs, rhs, {"C": C, "d": d, "n_adv": n_adv, "eps": eps})


def check_uniform_condition(noise, q_dir, n_adv, eps, gamma):
    """
    All premises for learning from perturbed uniform noise

    The returned report passes exactly when every part does: its lhs is the
    smallest per-part slack and its rhs is 0.
    """
    q_dir = np.asarray(q_dir, dtype=np.float64)
    q_norm = np.linalg.norm(q_dir)
    if q_norm == 0.0:
        raise DegenerateDirectionError("perturbation direction is zero")
    q_dir = q_dir / q_norm
    d = noise.d
    C = math.log(1000 * n_adv)
    sq_norms = np.einsum("ij,ij->i", noise.X, noise.X)
    parts = (
        ConditionReport("norm_band", math.sqrt(C * d) / 2, float(np.max(np.abs(sq_norms - d / 3))), {"C": C}),
        ConditionReport("pairwise", math.sqrt(2 * C * d), ortho_stats(noise).p_max, {"C": C}),
        ConditionReport("projection", math.sqrt(2 * C), float(np.max(np.abs(noise.X @ q_dir))), {"C": C}),
        uniform_main_inequality(d, n_adv, eps, gamma),
    )
    slack = min(p.lhs - p.rhs for p in parts)
    return ConditionReport("uniform", slack, 0.0, {"C": C, "eps": eps, "gamma": gamma, "n_adv": n_adv}, parts=parts)


def lambda_interval(stats, gamma):
    return 1.0 / (2 * stats.r_max ** 2), 3.0 / (2 * gamma ** 2 * stats.r_min ** 2)


def check_lambda_bounds(lambdas, stats, gamma):
    """Counts coefficients strictly inside the open interval; passes when all are"""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    lo, hi = lambda_interval(stats, gamma)
    inside = int(np.sum((lambdas > lo) & (lambdas < hi)))
    constants = {"lower": lo, "upper": hi, "lambda_min": float(lambdas.min()), "lambda_max": float(lambdas.max())}
    return ConditionReport("lambda_bounds", float(inside), float(lambdas.size), constants)


def _rate_row(d, n, claim, hits, trials, bound, upper=False):
    rate = hits / trials
    p = min(max(bound, 0.0), 1.0)
    margin = MC_SIGMAS * math.sqrt(p * (1.0 - p) / trials)
    passed = rate <= bound + margin if upper else rate >= bound - margin
    return {
        "d": d,
        "n": n,
        "statistic": "empirical_rate",
        "normalized_ratio": rate / bound if bound > 0 else math.inf,
        "claim": claim,
        "rate": rate,
        "bound": bound,
        "margin": margin,
        "passed": bool(passed),
    }


def _table(rows):
    frame = records_to_frame(rows, TABLE_COLUMNS)
    return ProbeTable(frame, {f"claim_{row['claim']}": row["passed"] for row in rows})


def verify_uniform_vector_lemma(d, n, t, trials, seed, z=None):
    """
    Monte-Carlo rates of the three concentration events for U([-1,1]^d) samples

    (a) max |‖X_n‖² - d/3| <= sqrt(d ln tN)/2
    (b) max |<X_n, X_k>| <= sqrt(2 d ln tN) against an independent reference X_k
    (c) max |<X_n, z>| <= sqrt(2 ln tN) ‖z‖, z = e_1 by default
    """
    if t * n <= 1:
        raise ProbeError(f"need t > 1/N, got t={t}, N={n}")
    if trials < 100:
        raise ProbeError(f"need at least 100 trials, got {trials}")
    z = np.eye(1, d).ravel() if z is None else np.asarray(z, dtype=np.float64)
    log_tn = math.log(t * n)
    limits = {
        "a": math.sqrt(d * log_tn) / 2,
        "b": math.sqrt(2 * d * log_tn),
        "c": math.sqrt(2 * log_tn) * np.linalg.norm(z),
    }
    hits = dict.fromkeys(limits, 0)
    for i in range(trials):
        rng = make_rng(seed, f"theory.uniform_lemma/{i}")
        X = rng.uniform(-1.0, 1.0, size=(n, d))
        reference = rng.uniform(-1.0, 1.0, size=d)
        hits["a"] += np.max(np.abs(np.einsum("ij,ij->i", X, X) - d / 3)) <= limits["a"]
        hits["b"] += np.max(np.abs(X @ reference)) <= limits["b"]
        hits["c"] += np.max(np.abs(X @ z)) <= limits["c"]
    bound = (1.0 - 2.0 / (t * n)) ** n
    return _table([_rate_row(d, n, claim, int(hits[claim]), trials, bound) for claim in limits])


def verify_subgaussian_vector_lemma(d, n, trials, source, seed, claims=("a", "b", "c"), z=None):
    """
    Monte-Carlo rates of the sub-Gaussian concentration events with C = ln(1000 N)

    (a) max |‖X_n‖² - d| <= 16 sqrt(2 d C), needs d >= 2C
    (b) max |<X_n, X_k>| <= 2 sqrt(2 d C), needs d >= C/4
    (c) max |<X_n, z>| <= sqrt(2C) ‖z‖
    """
    if source not in ("gaussian", "rademacher"):
        raise ProbeError(f"sub-Gaussian lemma covers gaussian and rademacher sources, got {source!r}")
    C = math.log(1000 * n)
    preconditions = {"a": 2 * C, "b": C / 4, "c": 0.0}
    for claim in claims:
        if d < preconditions[claim]:
            raise ProbeError(f"claim ({claim}) needs d >= {preconditions[claim]:.3f}, got d={d}")
    z = np.eye(1, d).ravel() if z is None else np.asarray(z, dtype=np.float64)
    limits = {
        "a": 16 * math.sqrt(2 * d * C),
        "b": 2 * math.sqrt(2 * d * C),
        "c": math.sqrt(2 * C) * np.linalg.norm(z),
    }
    hits = dict.fromkeys(claims, 0)

    def draw(rng, shape):
        if source == "gaussian":
            return rng.standard_normal(shape)
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0

    for i in range(trials):
        rng = make_rng(seed, f"theory.subgaussian_lemma/{i}")
        X = draw(rng, (n, d))
        reference = draw(rng, d)
        if "a" in hits:
            hits["a"] += np.max(np.abs(np.einsum("ij,ij->i", X, X) - d)) <= limits["a"]
        if "b" in hits:
            hits["b"] += np.max(np.abs(X @ reference)) <= limits["b"]
        if "c" in hits:
            hits["c"] += np.max(np.abs(X @ z)) <= limits["c"]
    bound = (1.0 - 1.0 / (500 * n)) ** n
    return _table([_rate_row(d, n, claim, int(hits[claim]), trials, bound) for claim in claims])


def concentration_bound(a_bounds, b_bounds, t):
    widths = np.asarray(b_bounds, dtype=np.float64) - np.asarray(a_bounds, dtype=np.float64)
    return 2.0 * math.exp(float(np.sum(widths ** 2)) / 8.0 - t)


def verify_concentration(a_bounds, b_bounds, t, trials, seed, sampler="uniform"):
    """
    Empirical P[|sum x_n| >= t] for independent zero-mean x_n in [a_n, b_n]

    sampler "uniform" draws U([a_n, b_n]) and needs symmetric intervals;
    "two_point" puts all mass on the endpoints with zero mean.
    """
    a = np.asarray(a_bounds, dtype=np.float64)
    b = np.asarray(b_bounds, dtype=np.float64)
    if a.shape != b.shape or np.any(a > b):
        raise ProbeError("intervals must satisfy a_n <= b_n")
    if np.any(a > 0.0) or np.any(b < 0.0):
        raise ProbeError("zero-mean samples need a_n <= 0 <= b_n")
    if sampler == "uniform" and not np.allclose(a, -b):
        raise ProbeError("uniform sampler needs symmetric intervals")
    if sampler not in ("uniform", "two_point"):
        raise ProbeError(f"unknown sampler {sampler!r}")
    width = b - a
    p_upper = np.divide(-a, width, out=np.zeros_like(width), where=width > 0.0)
    hits = 0
    for i in range(trials):
        rng = make_rng(seed, f"theory.concentration/{i}")
        if sampler == "uniform":
            x = rng.uniform(a, b) if np.any(width > 0.0) else np.zeros_like(a)
        else:
            x = np.where(rng.random(a.shape) < p_upper, b, a)
        hits += abs(float(np.sum(x))) >= t
    bound = concentration_bound(a, b, t)
    return _table([_rate_row(0, a.size, "hoeffding", int(hits), trials, bound, upper=True)])


def _orthogonal_lambdas(d, n, seed, gamma):
    ds = gen_orthogonal_dataset(d, n, seed)
    premise = check_theorem1(ortho_stats(ds), n, gamma)
    if not premise.passed:
        raise ProbeError(f"orthogonality premise fails at d={d}, N={n}")
    try:
        return ds, solve_lambda(ds, gamma, 1, 1)
    except LambdaSolveError as exc:
        raise ProbeError(f"premise violated at d={d}, N={n}: {exc}")


def _band_ok(values):
    values = np.asarray(values, dtype=np.float64)
    return bool(np.all(values > 0) and values.max() / values.min() <= BAND_FACTOR)


def growth_probe_qnorm(scales, gamma, seed):
    """‖q‖ * sqrt(d/n) per scale; asserts the values stay within a factor-4 band"""
    rows = []
    for d, n in scales:
        ds, lambdas = _orthogonal_lambdas(d, n, derive_seed(seed, f"theory.qnorm/{d}/{n}"), gamma)
        q_norm = BoundaryModel.from_lambdas(ds, lambdas).q_norm
        rows.append({"d": d, "n": n, "statistic": "q_norm", "normalized_ratio": q_norm * math.sqrt(d / n),
                     "value": q_norm})
    frame = records_to_frame(rows, TABLE_COLUMNS)
    return ProbeTable(frame, {"ratio_band": _band_ok(frame["normalized_ratio"])})


def _predicted_orders(d, n, family, rule):
    if family is ProbeFamily.STRONG_ONE:
        return d / n, d / n
    t1 = d / n if rule is LabelRule.RANDOM else d / math.sqrt(n)
    return t1, d / math.sqrt(n)


def term_magnitude_probe(d_n_grid, probe_family, label_rule, gamma, seed, seeds=50, eps_scale=1.0):
    """
    Median |T1|, |T2| and |T2|/|T1| over seeds for geometry-L2 perturbations of size
    eps_scale * sqrt(d/N) on orthogonal data with norms sqrt(d)

    weak_all probes z = sum_n y_n x_n / sqrt(N); strong_one probes z = x_1. The
    adversarial coefficients come from the exact solve when it verifies, else from
    the equal-norm closed form 2/((1 + gamma^2) ‖x_adv‖²); fallbacks are counted.
    """
    family = ProbeFamily(probe_family)
    rule = LabelRule(label_rule)
    rows = []
    ratio_medians = []
    for d, n in d_n_grid:
        eps = eps_scale * math.sqrt(d / n)
        t1s, t2s, ratios = [], [], []
        fallbacks = 0
        for sub_seed in [derive_seed(seed, f"theory.terms/{d}/{n}/{i}") for i in range(seeds)]:
            ds, lambdas = _orthogonal_lambdas(d, n, sub_seed, gamma)
            model = BoundaryModel.from_lambdas(ds, lambdas)
            if rule is LabelRule.RANDOM:
                targets = target_labels(TargetRule.RANDOM_PM1, ds.y, n, sub_seed)
            else:
                targets = target_labels(TargetRule.FLIP, ds.y, n, sub_seed)
            adv = geometry_l2(ds, model, eps, targets)
            try:
                adv_lambdas = solve_lambda(adv.training_set(), gamma, 1, 1)
            except LambdaSolveError:
                fallbacks += 1
                adv_lambdas = 2.0 / ((1.0 + gamma ** 2) * np.einsum("ij,ij->i", adv.X, adv.X))
            if family is ProbeFamily.WEAK_ALL:
                z = ds.y @ ds.X / math.sqrt(n)
            else:
                z = ds.X[0]
            terms = boundary_terms(model, adv_lambdas, targets, eps, z)
            t1s.append(abs(terms.t1))
            t2s.append(abs(terms.t2))
            ratios.append(abs(terms.t2) / abs(terms.t1) if terms.t1 != 0.0 else math.inf)
        pred_t1, pred_t2 = _predicted_orders(d, n, family, rule)
        med_t1, med_t2, med_ratio = (float(np.median(v)) for v in (t1s, t2s, ratios))
        ratio_medians.append(med_ratio)
        common = {"d": d, "n": n, "eps": eps, "seeds": seeds, "lambda_fallbacks": fallbacks}
        rows.append({**common, "statistic": "t1_abs", "normalized_ratio": med_t1 / pred_t1, "value": med_t1})
        rows.append({**common, "statistic": "t2_abs", "normalized_ratio": med_t2 / pred_t2, "value": med_t2})
        rows.append({**common, "statistic": "t2_over_t1", "normalized_ratio": med_ratio * pred_t1 / pred_t2,
                     "value": med_ratio})
        logger.debug("terms d=%d N=%d: |T1|=%.4g |T2|=%.4g ratio=%.4g", d, n, med_t1, med_t2, med_ratio)
    frame = records_to_frame(rows, TABLE_COLUMNS)
    if family is ProbeFamily.WEAK_ALL and rule is LabelRule.RANDOM:
        assertions = {"ratio_increasing": bool(np.all(np.diff(ratio_medians) > 0))}
    else:
        assertions = {"ratio_band": _band_ok(ratio_medians)}
    return ProbeTable(frame, assertions)
