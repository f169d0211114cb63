import math

import numpy as np
import pytest

from attack import AttackSpec
from boundary import BoundaryMode, build_wstd, solve_lambda
from data import Source
from experiment import (
    DatasetParams,
    EvalConfig,
    ExperimentConfig,
    FlippedConfig,
    Scenario,
    eval_accuracy,
    flipped_experiment,
    scaled_epsilon,
    presets,
    run_pipeline,
    summary_frame,
    summary_table,
    sweep,
    sweep_config,
)
from formats import to_json
from net import NetworkConfig, NetworkParams
from train import StopConfig, TrainConfig
from utils import ConfigError, StageError


def _noise_cfg(d=64, n=8, n_adv=16, m=8, epochs=30, eps=0.353, **kw):
    train_cfg = TrainConfig(max_epochs=epochs, stop=StopConfig(check_every=50))
    options = {
        "name": "t",
        "scenario": Scenario.NOISE,
        "dataset": DatasetParams(d=d, n=n, n_adv=n_adv),
        "network": NetworkConfig(d=d, m=m),
        "standard_train": train_cfg,
        "student_train": train_cfg,
        "attack": AttackSpec(norm="L2", epsilon=eps),
        "eval": EvalConfig(n_probes=500),
    }
    options.update(kw)
    return ExperimentConfig(**options)


def _flipped_cfg(eps, epochs=300):
    return ExperimentConfig(
        name="flip",
        scenario=Scenario.FLIPPED,
        dataset=DatasetParams(source=Source.ORTHOGONALIZED, d=256, n=16),
        network=NetworkConfig(d=256, m=16),
        student_train=TrainConfig(max_epochs=epochs),
        attack=AttackSpec(norm="L2", epsilon=eps, target_rule="flip"),
        eval=EvalConfig(n_probes=2000),
    )


def test_noise_perturbations_teach_the_natural_task():
    cfg = _noise_cfg(d=2048, n=32, n_adv=512, m=16, epochs=200)
    result = run_pipeline(cfg)
    assert result.accuracy_on_natural >= 0.9
    assert result.scenario is Scenario.NOISE
    assert result.extra["n_adv"] == 512
    assert result.condition("uniform") is not None


def test_unperturbed_noise_control_stays_near_chance():
    result = run_pipeline(_noise_cfg(d=2048, n=32, n_adv=512, m=16, epochs=200, eps=0.0))
    assert result.accuracy_on_natural <= 0.8


def test_pipeline_is_deterministic():
    a = run_pipeline(_noise_cfg())
    b = run_pipeline(_noise_cfg())
    assert to_json(a.to_dict(with_time=False)) == to_json(b.to_dict(with_time=False))
    assert a.provenance_id == b.provenance_id


def test_pipeline_reports():
    cfg = _noise_cfg(eval=EvalConfig(n_probes=300, map_resolution=8), dataset=DatasetParams(d=64, n=8, n_adv=16,
                                                                                            held_out=10))
    result = run_pipeline(cfg)
    assert result.condition("theorem1") is not None
    assert result.boundary_mode in (BoundaryMode.LAMBDA_EXACT, BoundaryMode.EMPIRICAL_VU)
    assert 0.0 <= result.agreement <= 1.0
    assert result.accuracy_held_out is not None
    assert set(result.decision_maps) == {"standard", "student"}
    assert 0.0 <= result.plane_agreement <= 1.0
    assert "wall_time" in result.to_dict() and "wall_time" not in result.to_dict(with_time=False)
    assert summary_table(result)["name"].iloc[0] == "t"


def test_natural_scenario_checks_the_perturbed_premise():
    cfg = _noise_cfg(
        scenario=Scenario.NATURAL,
        dataset=DatasetParams(source=Source.ORTHOGONALIZED, d=64, n=8),
        attack=AttackSpec(norm="L2", epsilon=0.001, target_rule="flip"),
    )
    result = run_pipeline(cfg)
    assert result.boundary_mode is BoundaryMode.LAMBDA_EXACT
    assert result.condition("natural") is not None
    assert result.condition("lambda_bounds").passed


def test_file_source_fails_in_data_stage():
    cfg = _noise_cfg(dataset=DatasetParams(source=Source.FILE, d=64, n=8, n_adv=16))
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "data"


def test_config_invariants():
    with pytest.raises(ConfigError, match="network.d"):
        _noise_cfg(network=NetworkConfig(d=32, m=8))
    with pytest.raises(ConfigError, match="n_adv"):
        _noise_cfg(dataset=DatasetParams(d=64, n=8, n_adv=None))
    with pytest.raises(ConfigError, match="n_adv"):
        _noise_cfg(scenario=Scenario.NATURAL, dataset=DatasetParams(d=64, n=8, n_adv=5))
    with pytest.raises(ConfigError, match="target_rule"):
        _noise_cfg(attack=AttackSpec(norm="L2", epsilon=1.0, target_rule="flip"))
    assert _flipped_cfg(1.0).flipped == FlippedConfig()


def test_config_dict_round_trip():
    cfg = _noise_cfg()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.n_adv == 16


def test_eval_accuracy(ortho_ds, small_cfg):
    lambdas = solve_lambda(ortho_ds, small_cfg.gamma, small_cfg.m_plus, small_cfg.m_minus)
    assert eval_accuracy(build_wstd(ortho_ds, lambdas, small_cfg), small_cfg, ortho_ds) == 1.0
    assert eval_accuracy(NetworkParams(np.zeros((8, 64))), small_cfg, ortho_ds) == 0.0


def test_flipped_without_perturbation_keeps_the_natural_labels():
    result = flipped_experiment(_flipped_cfg(0.0))
    assert result.extra["training_point_agreement"] <= 0.1
    assert result.standard_report is None


def test_flipped_with_large_perturbation_follows_the_non_robust_boundary():
    result = run_pipeline(_flipped_cfg(2 * math.sqrt(256 / 16)))
    assert result.scenario is Scenario.FLIPPED
    assert result.agreement > 0.9
    assert result.extra["robust_fraction"] == 0.5


def test_sweep_cell_matches_single_run():
    base = _noise_cfg()
    cells = sweep(base, "n_adv", [32], seeds=[3])
    direct = run_pipeline(sweep_config(base, "n_adv", 32, 3))
    assert cells[0].error is None
    assert cells[0].result.agreement == direct.agreement
    assert cells[0].result.name == "t-n_adv32-s3"


def test_sweep_cell_counts():
    base = _noise_cfg(epochs=10)
    assert len(sweep(base, "n_adv", [16, 32], seeds=[0, 1])) == 4
    cells = sweep(base, "n_adv", [16, 32], seeds=[0, 1], with_control=True)
    assert len(cells) == 8
    assert [c.epsilon for c in cells[:2]] == [0.353, 0.0]
    frame = summary_frame(cells)
    assert list(frame.columns[:6]) == ["axis", "value", "seed", "epsilon", "accuracy", "agreement"]
    assert frame["value"].tolist() == [16] * 4 + [32] * 4


def test_sweep_rejects_bad_axes():
    base = _noise_cfg()
    with pytest.raises(ConfigError):
        sweep(base, "n_adv", [32, 16])
    with pytest.raises(ConfigError):
        sweep(base, "n_adv", [])
    natural = _noise_cfg(scenario=Scenario.NATURAL, dataset=DatasetParams(d=64, n=8),
                         attack=AttackSpec(norm="L2", epsilon=1.0, target_rule="flip"))
    with pytest.raises(ConfigError):
        sweep_config(natural, "n_adv", 16, 0)


def test_sweep_over_dimension_scales_epsilon():
    cfg = sweep_config(_noise_cfg(), "d", 256, 0, scale_epsilon=True)
    assert cfg.network.d == cfg.dataset.d == 256
    assert cfg.attack.epsilon == pytest.approx(0.353 * 2)


def test_presets_are_consistent():
    table = presets()
    assert {"desk-noise-l2", "desk-natural-flip", "desk-flipped", "full-noise-l2"} <= set(table)
    for name, cfg in table.items():
        assert cfg.name == name
        assert cfg.network.d == cfg.dataset.d
    assert table["full-noise-l2"].attack.epsilon == pytest.approx(scaled_epsilon(10_000))
    assert table["desk-flipped"].scenario is Scenario.FLIPPED


@pytest.mark.slow
def test_noise_acceptance_run():
    cfg = _noise_cfg(d=4096, n=500, n_adv=4096, m=64, epochs=2000, eps=scaled_epsilon(4096),
                     eval=EvalConfig(n_probes=10_000))
    result = run_pipeline(cfg)
    assert result.accuracy_on_natural >= 0.9


def _medians(cells, metric):
    frame = summary_frame(cells)
    assert frame["error"].isna().all()
    return frame.groupby("value")[metric].median().to_numpy()


@pytest.mark.slow
def test_agreement_grows_with_n_adv():
    base = _noise_cfg(d=4096, n=64, m=16, epochs=300, eps=scaled_epsilon(4096), eval=EvalConfig(n_probes=2000))
    agreement = _medians(sweep(base, "n_adv", [16, 64, 256, 1024], seeds=range(5)), "agreement")
    assert np.all(np.diff(agreement) >= -0.02)
    assert agreement[-1] > agreement[0]


@pytest.mark.slow
def test_accuracy_grows_with_dimension():
    base = _noise_cfg(d=512, n=64, n_adv=1024, m=16, epochs=300, eps=scaled_epsilon(512),
                      eval=EvalConfig(n_probes=2000))
    cells = sweep(base, "d", [512, 1024, 2048, 4096], seeds=range(5), scale_epsilon=True)
    assert cells[-1].epsilon == pytest.approx(scaled_epsilon(4096))
    accuracy = _medians(cells, "accuracy")
    assert np.all(np.diff(accuracy) >= -0.02)
    assert accuracy[-1] >= accuracy[0]
    assert accuracy[-1] >= 0.9
