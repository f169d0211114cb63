import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import pandas as pd
from tqdm import tqdm

from attack import AttackMode, AttackSpec, Norm, TargetRule, generate, target_labels
from boundary import (
    BoundaryMode,
    BoundaryModel,
    boundary_evaluator,
    decision_map,
    extract_vu,
    gaussian_probes,
    network_evaluator,
    plane_basis,
    sign_agreement,
    solve_lambda,
    split_weights,
    vu_from_lambdas,
)
from data import Source, gen_dataset, gen_flipped_split, ortho_stats
from net import NetworkConfig, init_params, margins
from seeding import derive_seed, make_rng
from theory import (
    check_lambda_bounds,
    check_natural_condition,
    check_theorem1,
    check_uniform_condition,
)
from train import StopConfig, TrainConfig, TrainReport, train
from utils import (
    AdvFeatError,
    ConfigError,
    DegenerateDirectionError,
    LambdaSolveError,
    StageError,
    records_to_frame,
    resolve_threads,
)

logger = logging.getLogger(__name__)


class Scenario(str, Enum):
    NATURAL = "natural"
    NOISE = "noise"
    FLIPPED = "flipped"


class AccuracyTarget(str, Enum):
    NATURAL_TRAIN = "natural_train"
    HELD_OUT = "held_out"


@dataclass(frozen=True)
class DatasetParams:
    source: Source = Source.UNIFORM
    d: int = 2048
    n: int = 205
    scale: float = 1.0
    noise_source: Source = Source.UNIFORM
    n_adv: int | None = None
    held_out: int = 0

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "noise_source", Source(self.noise_source))


@dataclass(frozen=True)
class EvalConfig:
    n_probes: int = 10_000
    band: float = 1e-3
    accuracy_target: AccuracyTarget = AccuracyTarget.NATURAL_TRAIN
    map_resolution: int = 0
    map_half_width: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "accuracy_target", AccuracyTarget(self.accuracy_target))


@dataclass(frozen=True)
class FlippedConfig:
    """Natural samples split into orthogonal robust and non-robust parts by squared norm"""

    robust_fraction: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig
    name: str = "experiment"
    scenario: Scenario = Scenario.NOISE
    dataset: DatasetParams = field(default_factory=DatasetParams)
    standard_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(epsilon=0.0))
    eval: EvalConfig = field(default_factory=EvalConfig)
    flipped: FlippedConfig | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.network.d != self.dataset.d:
            raise ConfigError("network.d", f"network dimension {self.network.d} != dataset dimension {self.dataset.d}")
        if self.scenario is not Scenario.NOISE and self.dataset.n_adv not in (None, self.dataset.n):
            raise ConfigError("dataset.n_adv", "perturbing natural samples keeps N_adv = N")
        if self.scenario is Scenario.NOISE:
            if self.dataset.n_adv is None:
                raise ConfigError("dataset.n_adv", "the noise scenario needs N_adv")
            if self.attack.target_rule is not TargetRule.RANDOM_PM1:
                raise ConfigError("attack.target_rule", "noise samples take random targets")
        if self.scenario is Scenario.FLIPPED and self.flipped is None:
            object.__setattr__(self, "flipped", FlippedConfig())

    @property
    def n_adv(self):
        return self.dataset.n if self.scenario is not Scenario.NOISE else self.dataset.n_adv

    def to_dict(self):
        return {
            "name": self.name,
            "scenario": self.scenario.value,
            "dataset": {**self.dataset.__dict__, "source": self.dataset.source.value,
                        "noise_source": self.dataset.noise_source.value},
            "network": self.network.to_dict(),
            "standard_train": self.standard_train.to_dict(),
            "student_train": self.student_train.to_dict(),
            "attack": self.attack.to_dict(),
            "eval": {**self.eval.__dict__, "accuracy_target": self.eval.accuracy_target.value},
            "flipped": dict(self.flipped.__dict__) if self.flipped is not None else None,
            "seed": self.seed,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        flipped = data.get("flipped")
        return cls(
            name=data["name"],
            scenario=data["scenario"],
            dataset=DatasetParams(**data["dataset"]),
            network=NetworkConfig.from_dict(data["network"]),
            standard_train=TrainConfig.from_dict(data["standard_train"]),
            student_train=TrainConfig.from_dict(data["student_train"]),
            attack=AttackSpec.from_dict(data["attack"]),
            eval=EvalConfig(**data["eval"]),
            flipped=FlippedConfig(**flipped) if flipped is not None else None,
            seed=data["seed"],
            threads=data.get("threads", 1),
        )


@dataclass
class ExperimentResult:
    name: str
    scenario: Scenario
    standard_report: TrainReport | None
    student_report: TrainReport
    condition_reports: list
    boundary_mode: BoundaryMode
    agreement_vs_standard: object
    accuracy_on_natural: float
    accuracy_held_out: float | None = None
    plane_agreement: float | None = None
    provenance_id: int = 0
    extra: dict = field(default_factory=dict)
    decision_maps: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def agreement(self):
        return self.agreement_vs_standard.rate

    def condition(self, name):
        for report in self.condition_reports:
            if report.name == name:
                return report
        return None

    def to_dict(self, with_time=True):
        data = {
            "name": self.name,
            "scenario": Scenario(self.scenario).value,
            "standard_report": self.standard_report.to_dict() if self.standard_report else None,
            "student_report": self.student_report.to_dict(),
            "condition_reports": [r.to_dict() for r in self.condition_reports],
            "boundary_mode": BoundaryMode(self.boundary_mode).value,
            "agreement_vs_standard": self.agreement_vs_standard.to_dict(),
            "accuracy_on_natural": self.accuracy_on_natural,
            "accuracy_held_out": self.accuracy_held_out,
            "plane_agreement": self.plane_agreement,
            "provenance_id": self.provenance_id,
            "extra": dict(self.extra),
            "decision_maps": sorted(self.decision_maps),
            "config": self.config,
        }
        if with_time:
            data["wall_time"] = self.wall_time
        return data


@contextmanager
def _stage(name):
    logger.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except (AdvFeatError, ValueError, ArithmeticError) as exc:
        logger.error("stage %s failed: %s", name, exc)
        raise StageError(name, exc) from exc


def eval_accuracy(params, cfg, dataset):
    """Fraction of samples with y_n f(x_n) > 0; a zero output counts as wrong"""
    return float(np.mean(margins(params, cfg, dataset) > 0.0))


def standard_boundary(dataset, params, cfg):
    """
    Exact boundary when the dual system verifies, else the averaged hidden rows

    Returns:
        tuple: (BoundaryModel, lambdas or None)
    """
    try:
        lambdas = solve_lambda(dataset, cfg.gamma, cfg.m_plus, cfg.m_minus)
    except LambdaSolveError as exc:
        logger.warning("falling back to empirical v/u boundary: %s", exc)
        v, u = extract_vu(params, cfg)
        return BoundaryModel.from_vu(v, u), None
    weights = None if cfg.balanced else split_weights(dataset, cfg.gamma, cfg.m_plus, cfg.m_minus)
    return BoundaryModel.from_lambdas(dataset, lambdas, weights=weights), lambdas


def _plane_axes(lambdas, dataset, params, cfg):
    if lambdas is not None:
        return vu_from_lambdas(dataset, lambdas, cfg.gamma, cfg.m)
    return extract_vu(params, cfg)


def _decision_maps(cfg, model, lambdas, natural, std_params, student):
    resolution = cfg.eval.map_resolution
    net = cfg.network
    v, u = _plane_axes(lambdas, natural, std_params, net)
    try:
        v_hat, u_hat = plane_basis(v, u)
    except DegenerateDirectionError as exc:
        logger.warning("skipping decision maps: %s", exc)
        return {}, None
    half_width = cfg.eval.map_half_width
    if half_width is None:
        coords, *_ = np.linalg.lstsq(np.vstack([v_hat, u_hat]).T, natural.X.T, rcond=None)
        half_width = 1.2 * float(np.abs(coords).max())
    maps = {
        "standard": decision_map(boundary_evaluator(model), v, u, half_width, resolution, [natural]),
        "student": decision_map(network_evaluator(student, net), v, u, half_width, resolution, [natural]),
    }
    return maps, maps["student"].agreement(maps["standard"])


def run_pipeline(cfg):
    """
    Train a standard classifier, perturb, retrain from scratch on the targets, evaluate

    Args:
        cfg (ExperimentConfig): Full experiment description

    Returns:
        ExperimentResult: Reports, agreement and accuracy

    Raises:
        StageError: tagged with the failing stage
    """
    if cfg.scenario is Scenario.FLIPPED:
        return flipped_experiment(cfg)
    started = time.perf_counter()
    net = cfg.network
    ds_cfg = cfg.dataset

    with _stage("data"):
        natural = gen_dataset(ds_cfg.source, ds_cfg.d, ds_cfg.n, derive_seed(cfg.seed, "experiment.natural"),
                              ds_cfg.scale)
        held_out = None
        if ds_cfg.held_out:
            held_out = gen_dataset(ds_cfg.source, ds_cfg.d, ds_cfg.held_out,
                                   derive_seed(cfg.seed, "experiment.held_out"), ds_cfg.scale)

    with _stage("train_standard"):
        p0 = init_params(net, derive_seed(cfg.seed, "experiment.standard_init"))
        std_params, std_report = train(p0, net, natural, cfg.standard_train)

    with _stage("boundary"):
        model, lambdas = standard_boundary(natural, std_params, net)
        stats = ortho_stats(natural)
        reports = [check_theorem1(stats, natural.n, net.gamma)]
        if lambdas is not None:
            reports.append(check_lambda_bounds(lambdas, stats, net.gamma))

    spec = cfg.attack
    with _stage("attack"):
        if cfg.scenario is Scenario.NATURAL:
            base = natural
        else:
            base = gen_dataset(ds_cfg.noise_source, ds_cfg.d, ds_cfg.n_adv,
                               derive_seed(cfg.seed, "experiment.noise"), 1.0)
        targets = target_labels(spec.target_rule, base.y, base.n, derive_seed(cfg.seed, "experiment.targets"),
                                spec.explicit_targets)
        adv = generate(base, spec, targets=targets, model=model, params=std_params, cfg=net, class_data=natural)
        geometric_l2 = spec.mode is AttackMode.GEOMETRY and spec.norm is Norm.L2
        if geometric_l2 and cfg.scenario is Scenario.NATURAL:
            reports.append(check_natural_condition(stats, natural.n, net.gamma, spec.epsilon))
        if geometric_l2 and cfg.scenario is Scenario.NOISE and ds_cfg.noise_source is Source.UNIFORM:
            reports.append(check_uniform_condition(base, model.q, ds_cfg.n_adv, spec.epsilon, net.gamma))
        for report in reports:
            logger.info("%s", report.summary())

    with _stage("train_student"):
        s0 = init_params(net, derive_seed(cfg.seed, "experiment.student_init"))
        student, student_report = train(s0, net, adv.training_set(), cfg.student_train)

    with _stage("evaluate"):
        probes = gaussian_probes(net.d, cfg.eval.n_probes, derive_seed(cfg.seed, "experiment.probes"))
        agreement = sign_agreement(network_evaluator(student, net), boundary_evaluator(model), probes,
                                   cfg.eval.band)
        accuracy = eval_accuracy(student, net, natural)
        held_out_accuracy = eval_accuracy(student, net, held_out) if held_out is not None else None
        maps, plane_agreement = {}, None
        if cfg.eval.map_resolution > 0:
            maps, plane_agreement = _decision_maps(cfg, model, lambdas, natural, std_params, student)

    result = ExperimentResult(
        name=cfg.name,
        scenario=cfg.scenario,
        standard_report=std_report,
        student_report=student_report,
        condition_reports=reports,
        boundary_mode=model.mode,
        agreement_vs_standard=agreement,
        accuracy_on_natural=accuracy,
        accuracy_held_out=held_out_accuracy,
        plane_agreement=plane_agreement,
        provenance_id=adv.provenance_id,
        extra={"n_adv": adv.n, "flagged": int(adv.flagged.sum()) if adv.flagged is not None else 0},
        decision_maps=maps,
        config=cfg.to_dict(),
        wall_time=time.perf_counter() - started,
    )
    logger.info(
        "%s: accuracy %.3f, agreement %.3f (%s boundary) in %.1fs",
        cfg.name, accuracy, agreement.rate, model.mode.value, result.wall_time,
    )
    return result


def weak_correlation_probes(parts, n_probes, seed):
    """z_k = sum_n s_kn x_n / sqrt(N) with Rademacher signs s_kn"""
    rng = make_rng(seed, "experiment.weak_probes")
    signs = rng.integers(0, 2, size=(n_probes, parts.shape[0])).astype(np.float64) * 2.0 - 1.0
    return signs @ parts / math.sqrt(parts.shape[0])


def flipped_experiment(cfg):
    """
    Learn from label-flipped natural samples perturbed along the non-robust boundary

    Samples are x_n = x_rob_n + x_non_n with mutually orthogonal parts. The boundary
    is built from the non-robust parts alone and the student is scored against it on
    weak-correlation probes over the non-robust parts and on the training points.
    """
    started = time.perf_counter()
    net = cfg.network
    flipped = cfg.flipped or FlippedConfig()
    spec = cfg.attack

    with _stage("data"):
        split = gen_flipped_split(cfg.dataset.d, cfg.dataset.n, derive_seed(cfg.seed, "experiment.flipped"),
                                  flipped.robust_fraction)
        natural = split.natural
        nonrobust = split.nonrobust_dataset

    with _stage("boundary"):
        lambdas = solve_lambda(nonrobust, net.gamma, net.m_plus, net.m_minus)
        weights = None if net.balanced else split_weights(nonrobust, net.gamma, net.m_plus, net.m_minus)
        model = BoundaryModel.from_lambdas(nonrobust, lambdas, weights=weights)
        stats = ortho_stats(nonrobust)
        reports = [check_theorem1(stats, nonrobust.n, net.gamma), check_lambda_bounds(lambdas, stats, net.gamma)]

    with _stage("attack"):
        adv = generate(natural, spec, targets=-natural.y, model=model)

    with _stage("train_student"):
        s0 = init_params(net, derive_seed(cfg.seed, "experiment.student_init"))
        student, student_report = train(s0, net, adv.training_set(), cfg.student_train)

    with _stage("evaluate"):
        probes = weak_correlation_probes(split.nonrobust, cfg.eval.n_probes,
                                         derive_seed(cfg.seed, "experiment.probes"))
        agreement = sign_agreement(network_evaluator(student, net), boundary_evaluator(model), probes,
                                   cfg.eval.band)
        student_signs = np.sign(network_evaluator(student, net)(natural.X))
        boundary_signs = np.sign(model.evaluate(natural.X))
        training_agreement = float(np.mean(student_signs == boundary_signs))
        accuracy = eval_accuracy(student, net, natural)

    result = ExperimentResult(
        name=cfg.name,
        scenario=Scenario.FLIPPED,
        standard_report=None,
        student_report=student_report,
        condition_reports=reports,
        boundary_mode=model.mode,
        agreement_vs_standard=agreement,
        accuracy_on_natural=accuracy,
        provenance_id=adv.provenance_id,
        extra={"training_point_agreement": training_agreement, "robust_fraction": flipped.robust_fraction},
        config=cfg.to_dict(),
        wall_time=time.perf_counter() - started,
    )
    logger.info("%s: weak-probe agreement %.3f, training-point agreement %.3f",
                cfg.name, agreement.rate, training_agreement)
    return result


class SweepAxis(str, Enum):
    D = "d"
    N_ADV = "n_adv"


@dataclass
class SweepCell:
    axis: SweepAxis
    value: int
    seed: int
    epsilon: float | None
    result: ExperimentResult | None = None
    error: str | None = None

    def row(self):
        row = {
            "axis": SweepAxis(self.axis).value,
            "value": self.value,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "accuracy": None,
            "agreement": None,
            "plane_agreement": None,
            "boundary_mode": None,
            "error": self.error,
        }
        if self.result is not None:
            row.update(
                accuracy=self.result.accuracy_on_natural,
                agreement=self.result.agreement,
                plane_agreement=self.result.plane_agreement,
                boundary_mode=BoundaryMode(self.result.boundary_mode).value,
            )
            for report in self.result.condition_reports:
                row[f"{report.name}_pass"] = report.passed
        return row


def sweep_config(base_cfg, axis, value, seed, scale_epsilon=False, epsilon=None):
    """Configuration of one sweep cell"""
    axis = SweepAxis(axis)
    attack = base_cfg.attack
    if axis is SweepAxis.D:
        dataset = replace(base_cfg.dataset, d=value)
        network = replace(base_cfg.network, d=value)
        if scale_epsilon and attack.epsilon is not None:
            attack = replace(attack, epsilon=attack.epsilon * math.sqrt(value / base_cfg.dataset.d))
    else:
        if base_cfg.scenario is not Scenario.NOISE:
            raise ConfigError("sweep.axis", "only the noise scenario varies N_adv independently")
        dataset = replace(base_cfg.dataset, n_adv=value)
        network = base_cfg.network
    if epsilon is not None:
        attack = replace(attack, epsilon=epsilon)
    name = f"{base_cfg.name}-{axis.value}{value}-s{seed}"
    if epsilon == 0.0:
        name += "-control"
    return replace(base_cfg, name=name, dataset=dataset, network=network, attack=attack, seed=seed)


def _run_cell(args):
    axis, value, seed, cfg = args
    try:
        return SweepCell(axis, value, seed, cfg.attack.epsilon, result=run_pipeline(cfg))
    except AdvFeatError as exc:
        logger.error("sweep cell %s=%s seed=%s failed: %s", axis.value, value, seed, exc)
        return SweepCell(axis, value, seed, cfg.attack.epsilon, error=str(exc))


def sweep(base_cfg, axis, values, seeds=None, threads=1, scale_epsilon=False, with_control=False, progress=False):
    """
    One pipeline per (value, seed), optionally paired with an epsilon = 0 control

    Args:
        base_cfg (ExperimentConfig): Template
        axis (SweepAxis): "d" or "n_adv"
        values (list): Sorted, non-empty axis values
        seeds (list, optional): Root seeds; defaults to the template's
        threads (int): Parallel cells (processes)
        scale_epsilon (bool): Scale epsilon by sqrt(d / d_template) along the d axis
        with_control (bool): Also run every cell with epsilon = 0

    Returns:
        list: SweepCell per run, in (value, seed, control) order
    """
    axis = SweepAxis(axis)
    values = list(values)
    if not values:
        raise ConfigError("sweep.values", "need at least one value")
    if values != sorted(values):
        raise ConfigError("sweep.values", "values must be sorted")
    seeds = [base_cfg.seed] if seeds is None else list(seeds)
    jobs = []
    for value in values:
        for seed in seeds:
            jobs.append((axis, value, seed, sweep_config(base_cfg, axis, value, seed, scale_epsilon)))
            if with_control:
                jobs.append((axis, value, seed, sweep_config(base_cfg, axis, value, seed, scale_epsilon, 0.0)))
    workers = resolve_threads(threads)
    if workers == 1:
        return [_run_cell(job) for job in tqdm(jobs, disable=not progress, desc="sweep")]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(_run_cell, jobs), total=len(jobs), disable=not progress, desc="sweep"))


def summary_frame(cells):
    return records_to_frame([cell.row() for cell in cells],
                            ["axis", "value", "seed", "epsilon", "accuracy", "agreement"])


def scaled_epsilon(d):
    return 0.78 * math.sqrt(d / 10_000)


def scaled_n(d):
    return max(1, round(1000 * d / 10_000))


def _early_stop_train(max_epochs, **kw):
    return TrainConfig(max_epochs=max_epochs, stop=StopConfig(check_every=50, window=3, direction_tol=1e-5), **kw)


def presets():
    """Named experiment configurations"""
    desk_d = 2048
    flipped_d, flipped_n = 4096, 128
    return {
        "desk-noise-l2": ExperimentConfig(
            name="desk-noise-l2",
            scenario=Scenario.NOISE,
            dataset=DatasetParams(d=desk_d, n=scaled_n(desk_d), n_adv=2048),
            network=NetworkConfig(d=desk_d, m=64),
            standard_train=_early_stop_train(2000),
            student_train=_early_stop_train(2000),
            attack=AttackSpec(norm=Norm.L2, epsilon=scaled_epsilon(desk_d)),
            eval=EvalConfig(map_resolution=64),
        ),
        "desk-natural-flip": ExperimentConfig(
            name="desk-natural-flip",
            scenario=Scenario.NATURAL,
            dataset=DatasetParams(source=Source.ORTHOGONALIZED, d=512, n=64),
            network=NetworkConfig(d=512, m=64),
            standard_train=_early_stop_train(5000),
            student_train=_early_stop_train(5000),
            attack=AttackSpec(norm=Norm.L2, epsilon=4 * math.sqrt(512 / 64), target_rule=TargetRule.FLIP),
            eval=EvalConfig(map_resolution=64),
        ),
        "desk-flipped": ExperimentConfig(
            name="desk-flipped",
            scenario=Scenario.FLIPPED,
            dataset=DatasetParams(source=Source.ORTHOGONALIZED, d=flipped_d, n=flipped_n),
            network=NetworkConfig(d=flipped_d, m=64),
            student_train=_early_stop_train(3000),
            attack=AttackSpec(norm=Norm.L2, epsilon=math.sqrt(flipped_d / flipped_n), target_rule=TargetRule.FLIP),
            flipped=FlippedConfig(),
        ),
        "full-noise-l2": ExperimentConfig(
            name="full-noise-l2",
            scenario=Scenario.NOISE,
            dataset=DatasetParams(d=10_000, n=scaled_n(10_000), n_adv=10_000),
            network=NetworkConfig(d=10_000, m=128),
            standard_train=TrainConfig(max_epochs=100_000),
            student_train=TrainConfig(max_epochs=100_000),
            attack=AttackSpec(norm=Norm.L2, epsilon=scaled_epsilon(10_000)),
            eval=EvalConfig(map_resolution=128),
        ),
    }


def summary_table(result):
    """One-row summary of a run"""
    row = {
        "name": result.name,
        "scenario": Scenario(result.scenario).value,
        "accuracy": result.accuracy_on_natural,
        "agreement": result.agreement,
        "plane_agreement": result.plane_agreement,
        "boundary_mode": BoundaryMode(result.boundary_mode).value,
        "provenance_id": result.provenance_id,
    }
    for report in result.condition_reports:
        row[f"{report.name}_pass"] = report.passed
    return pd.DataFrame([row])
