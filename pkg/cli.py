import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

import settings
from attack import generate, target_labels
from boundary import BoundaryModel, DecisionMap, solve_lambda
from data import Source, gen_dataset, ortho_stats
from experiment import run_pipeline, standard_boundary, summary_frame, summary_table, sweep
from formats import (
    export_csv,
    read_dataset,
    read_params,
    to_json,
    write_adversarial,
    write_dataset,
    write_json,
    write_params,
)
from net import init_params
from plots import decision_map_figure, sweep_figure, write_figure
from seeding import derive_seed
from theory import (
    LabelRule,
    ProbeFamily,
    check_lambda_bounds,
    check_natural_condition,
    check_theorem1,
    check_uniform_condition,
    term_magnitude_probe,
    verify_concentration,
    verify_subgaussian_vector_lemma,
    verify_uniform_vector_lemma,
)
from train import train
from utils import AdvFeatError, ConfigError, StageError

logger = logging.getLogger("advfeat")

SUITES = ("theorem1", "natural", "uniform", "lambda_bounds", "uniform_lemma", "subgaussian_lemma",
          "concentration", "term_probe")


def setup_logging(verbose=0):
    level = logging.DEBUG if verbose > 1 else logging.INFO if verbose == 1 else settings.LOG_LEVEL
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _common(parser):
    parser.add_argument("--config", type=Path, help="JSON config document")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                        help="dotted override, repeatable")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("--out-dir", type=Path, help="output directory")
    parser.add_argument("--threads", type=int, help="worker count (default ADVFEAT_THREADS or 1)")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="count", default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="advfeat", description="Learning from adversarial perturbations, at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a dataset")
    _common(gen)
    gen.add_argument("--source", choices=[s.value for s in Source if s is not Source.FILE])
    gen.add_argument("--d", type=int)
    gen.add_argument("--n", type=int)
    gen.add_argument("--scale", type=float)
    gen.add_argument("--out", type=Path, help="AFPD path")
    gen.add_argument("--csv", type=Path, help="also export CSV")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a network on a dataset file")
    _common(tr)
    tr.add_argument("--dataset", type=Path, required=True)
    tr.add_argument("--out", type=Path, help="AFPW path")
    tr.set_defaults(func=cmd_train)

    at = sub.add_parser("attack", help="perturb a dataset file")
    _common(at)
    at.add_argument("--dataset", type=Path, required=True, help="points to perturb")
    at.add_argument("--reference", type=Path, help="natural dataset the boundary is built from (default --dataset)")
    at.add_argument("--params", type=Path, help="trained network (pgd/gradient modes, empirical fallback)")
    at.add_argument("--out", type=Path, help="adversarial AFPD path")
    at.set_defaults(func=cmd_attack)

    ch = sub.add_parser("check", help="run theory checks; exit 0 iff all pass")
    _common(ch)
    ch.add_argument("--suite", action="append", choices=SUITES + ("all",), required=True)
    ch.add_argument("--dataset", type=Path, help="dataset file for dataset-based checks (the noise set for uniform)")
    ch.add_argument("--natural", type=Path, help="natural dataset the uniform suite takes its boundary from")
    ch.add_argument("--params", type=Path, help="trained network on --natural (default: closed-form boundary)")
    ch.add_argument("--trials", type=int, default=1000)
    ch.set_defaults(func=cmd_check)

    rn = sub.add_parser("run", help="run the experiment pipeline")
    _common(rn)
    rn.add_argument("--preset", help="named preset")
    rn.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="sweep the pipeline over d or n_adv")
    _common(sw)
    sw.add_argument("--preset", help="named preset")
    sw.add_argument("--axis", choices=["d", "n_adv"])
    sw.add_argument("--values", help="comma-separated sorted values")
    sw.add_argument("--seeds", help="comma-separated root seeds")
    sw.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="figures from stored CSVs")
    _common(pl)
    pl.add_argument("--map", type=Path, help="decision-map grid CSV")
    pl.add_argument("--points", type=Path, help="projected points CSV for --map")
    pl.add_argument("--sweep", type=Path, help="sweep summary CSV")
    pl.add_argument("--metric", default="accuracy")
    pl.add_argument("--out", type=Path, required=True, help=".html or .svg")
    pl.set_defaults(func=cmd_plot)
    return parser


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def resolve(args):
    """Settings document with command-line flags applied last"""
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"experiment.seed={args.seed}", f"train.seed={args.seed}", f"attack.seed={args.seed}"]
    if args.threads is not None:
        overrides.append(f"experiment.threads={args.threads}")
    if args.out_dir is not None:
        overrides.append(f"output.out_dir={json.dumps(str(args.out_dir))}")
    if args.force:
        overrides.append("output.force=true")
    for flag, path in (("source", "dataset.source"), ("d", "dataset.d"), ("n", "dataset.n"),
                       ("scale", "dataset.scale"), ("preset", "experiment.preset"),
                       ("axis", "experiment.sweep.axis")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{path}={json.dumps(value)}")
    for flag, path in (("values", "experiment.sweep.values"), ("seeds", "experiment.sweep.seeds")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{path}={json.dumps(_int_list(value))}")
    return settings.load_document(args.config, overrides)


def _target(doc, path):
    path = Path(path)
    if path.exists() and not doc["output"]["force"]:
        raise ConfigError("output.force", f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _out_dir(doc):
    return Path(doc["output"]["out_dir"])


def cmd_gen(args, doc):
    ds = doc["dataset"]
    seed = doc["experiment"]["seed"]
    dataset = gen_dataset(ds["source"], ds["d"], ds["n"], seed, ds["scale"])
    default = _out_dir(doc) / "datasets" / f"{dataset.source.value}-d{dataset.d}-n{dataset.n}-s{seed}.afpd"
    path = write_dataset(dataset, _target(doc, args.out or default))
    if args.csv is not None:
        export_csv(dataset, _target(doc, args.csv))
    logger.info("wrote %s", path)
    return 0


def cmd_train(args, doc):
    dataset = read_dataset(args.dataset)
    cfg = settings.network_config(doc, d=dataset.d)
    tc = settings.train_config(doc)
    p0 = init_params(cfg, derive_seed(tc.seed, "cli.train_init"))
    params, report = train(p0, cfg, dataset, tc)
    out = args.out or _out_dir(doc) / "params" / f"{args.dataset.stem}.afpw"
    path = write_params(params, cfg, _target(doc, out))
    write_json(report, _target(doc, path.with_suffix(".report.json")))
    logger.info("trained %d epochs (%s), min margin %.4g", report.epochs_run, report.stopped_by.value,
                report.margin_min)
    return 0


def _reference_boundary(reference, params_path, doc):
    """
    Boundary of the standard network on a natural dataset

    With a params file the trained network decides (exact when the dual system
    verifies); without one the closed-form dual solution is used.

    Returns:
        tuple: (BoundaryModel, params or None, NetworkConfig)
    """
    if params_path is not None:
        params, cfg = read_params(params_path)
        model, _ = standard_boundary(reference, params, cfg)
        return model, params, cfg
    cfg = settings.network_config(doc, d=reference.d)
    lambdas = solve_lambda(reference, cfg.gamma, cfg.m_plus, cfg.m_minus)
    return BoundaryModel.from_lambdas(reference, lambdas), None, cfg


def cmd_attack(args, doc):
    base = read_dataset(args.dataset)
    reference = read_dataset(args.reference) if args.reference else base
    spec = settings.attack_spec(doc)
    model, params, cfg = _reference_boundary(reference, args.params, doc)
    targets = target_labels(spec.target_rule, base.y, base.n, spec.seed, spec.explicit_targets)
    adv = generate(base, spec, targets=targets, model=model, params=params, cfg=cfg, class_data=reference)
    out = args.out or _out_dir(doc) / "datasets" / f"{args.dataset.stem}-adv.afpd"
    path = write_adversarial(adv, _target(doc, out))
    logger.info("wrote %s (provenance %016x)", path, adv.provenance_id)
    return 0


def _dataset_checks(suite, dataset, doc):
    gamma = doc["network"]["gamma"]
    stats = ortho_stats(dataset)
    eps = doc["attack"]["epsilon"] or 0.0
    if suite == "theorem1":
        return [check_theorem1(stats, dataset.n, gamma)]
    if suite == "natural":
        return [check_natural_condition(stats, dataset.n, gamma, eps)]
    cfg = settings.network_config(doc, d=dataset.d)
    lambdas = solve_lambda(dataset, gamma, cfg.m_plus, cfg.m_minus)
    return [check_lambda_bounds(lambdas, stats, gamma)]


def _uniform_checks(noise, args, doc):
    if args.natural is None:
        raise ConfigError("check.natural", "suite uniform needs --natural for the perturbation direction")
    natural = read_dataset(args.natural)
    if natural.d != noise.d:
        raise ConfigError("check.natural", f"natural d={natural.d} does not match noise d={noise.d}")
    model, _, cfg = _reference_boundary(natural, args.params, doc)
    eps = doc["attack"]["epsilon"] or 0.0
    return [check_uniform_condition(noise, model.q, noise.n, eps, cfg.gamma)]


def cmd_check(args, doc):
    suites = SUITES if "all" in args.suite else tuple(dict.fromkeys(args.suite))
    seed = doc["experiment"]["seed"]
    gamma = doc["network"]["gamma"]
    dataset = read_dataset(args.dataset) if args.dataset else None
    results = {}
    for suite in suites:
        if suite in ("theorem1", "natural", "lambda_bounds", "uniform"):
            if dataset is None:
                raise ConfigError("check.dataset", f"suite {suite} needs --dataset")
            results[suite] = (_uniform_checks(dataset, args, doc) if suite == "uniform"
                              else _dataset_checks(suite, dataset, doc))
        elif suite == "uniform_lemma":
            results[suite] = verify_uniform_vector_lemma(4096, 16, 1000, args.trials, seed)
        elif suite == "subgaussian_lemma":
            results[suite] = verify_subgaussian_vector_lemma(4096, 16, args.trials, Source.RADEMACHER, seed)
        elif suite == "concentration":
            results[suite] = verify_concentration([-1.0] * 8, [1.0] * 8, 6.0, args.trials, seed)
        else:
            results[suite] = term_magnitude_probe([(4096, n) for n in (64, 128, 256, 512)], ProbeFamily.WEAK_ALL,
                                                  LabelRule.RANDOM, gamma, seed)
    passed = True
    for suite, result in results.items():
        reports = result if isinstance(result, list) else [result]
        for report in reports:
            if hasattr(report, "summary"):
                print(report.summary())
            else:
                print(f"{'PASS' if report.passed else 'FAIL'} {suite}: {report.assertions}")
            passed = passed and report.passed
    print(to_json({suite: result for suite, result in results.items()}))
    return 0 if passed else 1


def _write_run(result, run_dir, doc, fmt):
    write_json(result.config, _target(doc, run_dir / "config.json"))
    write_json(result.to_dict(), _target(doc, run_dir / "result.json"))
    summary_table(result).to_csv(_target(doc, run_dir / "summary.csv"), index=False)
    for name, dmap in result.decision_maps.items():
        dmap.to_frame().to_csv(_target(doc, run_dir / "maps" / f"{name}.csv"), index=False)
        dmap.points_frame().to_csv(_target(doc, run_dir / "maps" / f"{name}_points.csv"), index=False)
        write_figure(decision_map_figure(dmap, title=f"{result.name}: {name}"),
                     _target(doc, run_dir / "maps" / f"{name}.{fmt}"), fmt)


def cmd_run(args, doc):
    cfg = settings.experiment_config(doc)
    result = run_pipeline(cfg)
    run_dir = _out_dir(doc) / cfg.name
    _write_run(result, run_dir, doc, doc["output"]["figure_format"])
    print(summary_table(result).to_string(index=False))
    return 0


def cmd_sweep(args, doc):
    cfg = settings.experiment_config(doc)
    plan = doc["experiment"]["sweep"]
    cells = sweep(cfg, plan["axis"], plan["values"], seeds=plan["seeds"], threads=doc["experiment"]["threads"],
                  scale_epsilon=plan["scale_epsilon"], with_control=plan["with_control"], progress=True)
    run_dir = _out_dir(doc) / f"{cfg.name}-sweep-{plan['axis']}"
    write_json(doc, _target(doc, run_dir / "config.json"))
    frame = summary_frame(cells)
    frame.to_csv(_target(doc, run_dir / "summary.csv"), index=False)
    for cell in cells:
        if cell.result is not None:
            write_json(cell.result.to_dict(), _target(doc, run_dir / "cells" / f"{cell.result.name}.json"))
    write_figure(sweep_figure(frame, title=cfg.name),
                 _target(doc, run_dir / f"sweep.{doc['output']['figure_format']}"))
    print(frame.to_string(index=False))
    return 0 if frame["error"].isna().all() else 1


def cmd_plot(args, doc):
    if args.map is not None:
        if not args.map.exists():
            raise ConfigError("plot.map", f"{args.map}: no such file")
        points = pd.read_csv(args.points) if args.points is not None else None
        fig = decision_map_figure(DecisionMap.from_frames(pd.read_csv(args.map), points), title=args.map.stem)
    elif args.sweep is not None:
        if not args.sweep.exists():
            raise ConfigError("plot.sweep", f"{args.sweep}: no such file")
        fig = sweep_figure(pd.read_csv(args.sweep), metric=args.metric, title=args.sweep.parent.name)
    else:
        raise ConfigError("plot", "pass --map or --sweep")
    write_figure(fig, _target(doc, args.out))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        doc = resolve(args)
        if args.dry_run:
            print(to_json(doc))
            return 0
        return args.func(args, doc)
    except StageError as exc:
        logger.error("Error %s: %s", exc.stage, exc.cause)
        return 1
    except AdvFeatError as exc:
        logger.error("Error %s: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
